use std::time::Instant;

use adcensus::blinding::{DhGroup, PeerSecrets, Ristretto255, Roster, RosterEntry, UserKeyPair};
use adcensus::harness::run_round;
use adcensus::oprf::{LocalOprfServer, OprfClient, OprfServerKey};
use adcensus::simulator::{generate_world, SimConfig};
use adcensus::SketchParams;

use crate::{runtime, CliError};

pub fn run(users: u32, oprf_bits: usize, oprf_exchanges: u32) -> Result<(), CliError> {
    if users < 2 {
        return Err(CliError::Usage("--users must be at least 2".into()));
    }
    println!("# sketch payload (epsilon = delta = 0.001, 4-byte cells)");
    println!("capacity\tdepth\twidth\tbytes");
    for t in [10_000u64, 50_000, 100_000] {
        let p = SketchParams::new(0.001, 0.001, t, 0).map_err(runtime)?;
        println!("{t}\t{}\t{}\t{}", p.depth(), p.width(), p.payload_bytes());
    }

    let params = SketchParams::with_seed(0);
    let keys: Vec<UserKeyPair<Ristretto255>> = (1..=users).map(|i| UserKeyPair::generate(i, i as u64)).collect();
    let entries = keys
        .iter()
        .map(|k| RosterEntry {
            index: k.index(),
            public_key: k.public_bytes(),
        })
        .collect();
    let roster = Roster::new(1, Ristretto255::NAME, entries).map_err(runtime)?;
    let t = Instant::now();
    let secrets = PeerSecrets::derive(&keys[0], &roster).map_err(runtime)?;
    let derive = t.elapsed();
    let t = Instant::now();
    secrets
        .vector(params.cell_count(), &Default::default(), 0)
        .map_err(runtime)?;
    let vector = t.elapsed();
    println!("# blinding vector for one user, N = {users}, {} cells", params.cell_count());
    println!("key_agreement_ms\t{:.3}", derive.as_secs_f64() * 1e3);
    println!("mask_generation_ms\t{:.3}", vector.as_secs_f64() * 1e3);

    let key = OprfServerKey::generate_seeded(oprf_bits, 7).map_err(runtime)?;
    let public = key.public().clone();
    let mut server = LocalOprfServer::new(key);
    let mut client = OprfClient::new(public.clone(), adcensus::oprf::DEFAULT_AD_SPACE, 7).map_err(runtime)?;
    let t = Instant::now();
    for i in 0..oprf_exchanges {
        client
            .map_url(&format!("https://ads.example/bench/{i}"), &mut server)
            .map_err(runtime)?;
    }
    let per = t.elapsed().as_secs_f64() / oprf_exchanges.max(1) as f64;
    println!("# oprf exchange, {oprf_bits}-bit modulus{}", if public.insecure() { " (insecure size)" } else { "" });
    println!("round_trip_ms\t{:.3}", per * 1e3);
    println!(
        "request_bytes\t{}\nresponse_bytes\t{}",
        server.bytes_in / server.exchanges.max(1),
        server.bytes_out / server.exchanges.max(1)
    );

    let config = SimConfig {
        num_users: users,
        oprf_key_bits: oprf_bits,
        ..SimConfig::default()
    };
    let world = generate_world(&config);
    let log = world.simulate_week(0);
    let harness = config.harness_config(0).map_err(runtime)?;
    let outcome = run_round(&harness, &log.observations(&world)).map_err(runtime)?;
    println!("# messages in one simulated round, N = {users}");
    println!("kind\tcount\tbytes\tbytes_per_message");
    for (kind, s) in &outcome.stats {
        println!("{kind}\t{}\t{}\t{}", s.count, s.bytes, s.bytes / s.count.max(1));
    }
    Ok(())
}
