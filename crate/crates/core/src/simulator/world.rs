use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use super::config::{SimConfig, SlotModel};
use crate::client::{AdKey, AdObservation, WEEK_SECS};
use crate::harness::sub_seed;

#[derive(Debug, Clone, PartialEq)]
pub enum CampaignKind {
    Static { sites: Vec<u32> },
    Targeted { audience: Vec<u32>, cap: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub id: u32,
    pub kind: CampaignKind,
}

impl Campaign {
    pub fn is_targeted(&self) -> bool {
        matches!(self.kind, CampaignKind::Targeted { .. })
    }
}

#[derive(Debug, Clone)]
struct Browsing {
    sites: Vec<u32>,
    weights: WeightedIndex<f64>,
}

/// A generated ad ecosystem. Users are numbered from 0 here; the protocol
/// numbers them from 1.
#[derive(Debug, Clone)]
pub struct SimWorld {
    config: SimConfig,
    popularity: Vec<f64>,
    inventory: Vec<Vec<u32>>,
    slots: Vec<u32>,
    campaigns: Vec<Campaign>,
    clusters: Vec<u32>,
    browsing: Vec<Browsing>,
    targeting: Vec<Vec<u32>>,
    stressed: BTreeSet<u32>,
    ad_keys: Vec<AdKey>,
    domains: Vec<Arc<str>>,
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    Poisson::new(mean).expect("validated mean").sample(rng) as u32
}

fn uniform_in(rng: &mut ChaCha8Rng, [lo, hi]: [u32; 2]) -> u32 {
    rng.gen_range(lo..=hi)
}

/// `k` distinct indices into `weights`, drawn without replacement.
fn weighted_sample(rng: &mut ChaCha8Rng, weights: &[f64], k: usize) -> Vec<u32> {
    let idx: Vec<u32> = (0..weights.len() as u32).collect();
    idx.choose_multiple_weighted(rng, k.min(weights.len()), |&i| weights[i as usize])
        .expect("finite positive weights")
        .copied()
        .collect()
}

pub fn generate_world(config: &SimConfig) -> SimWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "world", 0));
    let s = config.num_websites as usize;
    let u = config.num_users as usize;
    let raw: Vec<f64> = (1..=s).map(|r| (r as f64).powf(-config.zipf_exponent)).collect();
    let total: f64 = raw.iter().sum();
    let popularity: Vec<f64> = raw.iter().map(|p| p / total).collect();

    let n_static = config.static_campaigns();
    let n_broad = (n_static as f64 * config.broad_fraction).round() as u32;
    let mut inventory: Vec<Vec<u32>> = vec![Vec::new(); s];
    let mut slots = vec![0u32; s];
    // campaigns-per-site keeps the same placement, scaled so a site hosts
    // avg_ads_per_site campaigns on average, and shows all of them per view
    let scale = match config.slot_model {
        SlotModel::SlotsPerView => 1.0,
        SlotModel::CampaignsPerSite => {
            let mean = |[lo, hi]: [u32; 2]| (lo + hi) as f64 / 2.0;
            let placements =
                n_broad as f64 * mean(config.broad_sites) + (n_static - n_broad) as f64 * mean(config.narrow_sites);
            (config.avg_ads_per_site * s as f64 / placements.max(1.0)).max(1.0)
        }
    };
    let narrow_w: Vec<f64> = popularity.iter().map(|p| p.powf(config.narrow_popularity_exponent)).collect();
    for c in 0..n_static {
        let broad = c < n_broad;
        let k = uniform_in(&mut rng, if broad { config.broad_sites } else { config.narrow_sites });
        let k = (k as f64 * scale).round() as usize;
        let placed = weighted_sample(&mut rng, if broad { &popularity } else { &narrow_w }, k);
        for site in placed {
            inventory[site as usize].push(c);
        }
    }
    if config.slot_model == SlotModel::SlotsPerView {
        for v in slots.iter_mut() {
            *v = poisson(&mut rng, config.avg_ads_per_site);
        }
    }

    let mut stress_sites = Vec::new();
    if let Some(stress) = &config.stress {
        let tail = (s / 2) as u32..s as u32;
        let tail: Vec<u32> = tail.collect();
        stress_sites = tail.choose_multiple(&mut rng, (stress.sites as usize).min(tail.len())).copied().collect();
        stress_sites.sort_unstable();
        let first = if n_static - n_broad >= stress.campaigns { n_broad } else { 0 };
        for &site in &stress_sites {
            for c in first..first + stress.campaigns {
                if !inventory[site as usize].contains(&c) {
                    inventory[site as usize].push(c);
                }
            }
        }
    }
    for inv in inventory.iter_mut() {
        if inv.is_empty() {
            let c = if n_static > n_broad {
                rng.gen_range(n_broad..n_static)
            } else {
                rng.gen_range(0..n_static)
            };
            inv.push(c);
        }
    }
    if config.slot_model == SlotModel::CampaignsPerSite {
        for (v, inv) in slots.iter_mut().zip(&inventory) {
            *v = inv.len() as u32;
        }
    }

    let k = config.interest_clusters;
    let clusters: Vec<u32> = (0..u).map(|_| rng.gen_range(0..k)).collect();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); k as usize];
    for (user, &c) in clusters.iter().enumerate() {
        members[c as usize].push(user as u32);
    }
    let mut campaigns: Vec<Campaign> = (0..n_static)
        .map(|id| Campaign {
            id,
            kind: CampaignKind::Static { sites: Vec::new() },
        })
        .collect();
    for (site, inv) in inventory.iter().enumerate() {
        for &c in inv {
            if let CampaignKind::Static { sites } = &mut campaigns[c as usize].kind {
                sites.push(site as u32);
            }
        }
    }
    let mut targeting: Vec<Vec<u32>> = vec![Vec::new(); u];
    for id in n_static..config.num_campaigns {
        let nk = uniform_in(&mut rng, [config.audience_clusters[0].min(k), config.audience_clusters[1].min(k)]);
        let chosen = index::sample(&mut rng, k as usize, nk as usize);
        let pool: Vec<u32> = chosen.iter().flat_map(|c| members[c].iter().copied()).collect();
        let [lo, hi] = config.audience_fraction;
        let f = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let n = ((f * pool.len() as f64).round() as usize).clamp(1, pool.len().max(1)).min(pool.len());
        let mut audience: Vec<u32> = pool.choose_multiple(&mut rng, n).copied().collect();
        audience.sort_unstable();
        for &user in &audience {
            targeting[user as usize].push(id);
        }
        campaigns.push(Campaign {
            id,
            kind: CampaignKind::Targeted {
                audience,
                cap: config.frequency_cap,
            },
        });
    }

    let mut stressed = BTreeSet::new();
    if let Some(stress) = &config.stress {
        let n = (stress.user_fraction * u as f64).round() as usize;
        stressed = index::sample(&mut rng, u, n).into_iter().map(|i| i as u32).collect();
    }
    let browsing = (0..u as u32)
        .map(|user| {
            let sites: Vec<u32> = if stressed.contains(&user) {
                stress_sites.clone()
            } else if config.favourite_sites > 0.0 {
                let n = poisson(&mut rng, config.favourite_sites).max(crate::client::MIN_AD_SERVING_DOMAINS as u32);
                weighted_sample(&mut rng, &popularity, n as usize)
            } else {
                (0..s as u32).collect()
            };
            let w: Vec<f64> = if stressed.contains(&user) {
                vec![1.0; sites.len()]
            } else {
                sites.iter().map(|&x| popularity[x as usize]).collect()
            };
            Browsing {
                weights: WeightedIndex::new(w).expect("positive weights"),
                sites,
            }
        })
        .collect();

    let ad_keys = (0..config.num_campaigns)
        .map(|c| AdKey::new(&format!("https://ads.example/c/{c}")).expect("valid ad key"))
        .collect();
    let domains = (0..s).map(|x| Arc::from(format!("site{x}.example"))).collect();
    SimWorld {
        config: config.clone(),
        popularity,
        inventory,
        slots,
        campaigns,
        clusters,
        browsing,
        targeting,
        stressed,
        ad_keys,
        domains,
    }
}

/// One ad shown to one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Impression {
    pub campaign: u32,
    pub site: u32,
    pub timestamp: u64,
}

/// A week of browsing: impressions per user (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct WeekLog {
    pub week: u32,
    pub visits: Vec<u32>,
    pub impressions: Vec<Vec<Impression>>,
}

impl WeekLog {
    pub fn total_impressions(&self) -> usize {
        self.impressions.iter().map(Vec::len).sum()
    }

    /// Logs in client observation format, indexed like the protocol roster.
    pub fn observations(&self, world: &SimWorld) -> Vec<Vec<AdObservation>> {
        self.impressions
            .iter()
            .map(|log| {
                log.iter()
                    .map(|i| AdObservation {
                        ad: world.ad_key(i.campaign).clone(),
                        domain: world.domains[i.site as usize].clone(),
                        timestamp: i.timestamp,
                    })
                    .collect()
            })
            .collect()
    }
}

/// True label of a (user, campaign) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Targeted,
    NonTargeted,
}

impl SimWorld {
    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn campaigns(&self) -> &[Campaign] {
        &self.campaigns
    }

    pub fn popularity(&self) -> &[f64] {
        &self.popularity
    }

    /// Static campaigns a site can show.
    pub fn inventory(&self, site: u32) -> &[u32] {
        &self.inventory[site as usize]
    }

    pub fn slots(&self, site: u32) -> u32 {
        self.slots[site as usize]
    }

    pub fn cluster(&self, user: u32) -> u32 {
        self.clusters[user as usize]
    }

    /// Targeted campaigns whose audience includes `user`.
    pub fn targeting(&self, user: u32) -> &[u32] {
        &self.targeting[user as usize]
    }

    pub fn is_stressed(&self, user: u32) -> bool {
        self.stressed.contains(&user)
    }

    pub fn browsable_sites(&self, user: u32) -> &[u32] {
        &self.browsing[user as usize].sites
    }

    pub fn ad_key(&self, campaign: u32) -> &AdKey {
        &self.ad_keys[campaign as usize]
    }

    pub fn domain(&self, site: u32) -> &Arc<str> {
        &self.domains[site as usize]
    }

    /// Campaign behind each ad key.
    pub fn campaign_index(&self) -> HashMap<AdKey, u32> {
        self.ad_keys.iter().enumerate().map(|(c, k)| (k.clone(), c as u32)).collect()
    }

    pub fn label(&self, user: u32, campaign: u32) -> Label {
        match &self.campaigns[campaign as usize].kind {
            CampaignKind::Targeted { audience, .. } if audience.binary_search(&user).is_ok() => Label::Targeted,
            _ => Label::NonTargeted,
        }
    }

    /// Browsing for week `week` (0-based) with the world's frequency cap.
    pub fn simulate_week(&self, week: u32) -> WeekLog {
        self.simulate_week_with_cap(week, self.config.frequency_cap)
    }

    /// Page views and static draws depend only on the seed, user and week.
    /// Each targeted pair has a fixed random order of the user's page views
    /// and takes its first `cap` of them, so raising the cap only adds
    /// impressions.
    pub fn simulate_week_with_cap(&self, week: u32, cap: u32) -> WeekLog {
        let seed = self.config.seed;
        let n_users = self.config.num_users as u64;
        let n_campaigns = self.config.num_campaigns as u64;
        let window_start = week as u64 * WEEK_SECS;
        let mut visits = Vec::with_capacity(self.browsing.len());
        let mut impressions = Vec::with_capacity(self.browsing.len());
        for (user, b) in self.browsing.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "visits", week as u64 * n_users + user as u64));
            let nv = poisson(&mut rng, self.config.avg_user_visits) as usize;
            let pages: Vec<u32> = (0..nv).map(|_| b.sites[b.weights.sample(&mut rng)]).collect();
            let mut targeted: Vec<Vec<u32>> = vec![Vec::new(); nv];
            if nv > 0 {
                for &c in &self.targeting[user] {
                    let idx = (week as u64 * n_users + user as u64) * n_campaigns + c as u64;
                    let mut trng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "targeted", idx));
                    let mut order: Vec<usize> = (0..nv).collect();
                    order.shuffle(&mut trng);
                    for &v in order.iter().take(cap as usize) {
                        targeted[v].push(c);
                    }
                }
            }
            let mut log = Vec::new();
            for (v, &site) in pages.iter().enumerate() {
                let timestamp = window_start + (v as u64 * WEEK_SECS) / nv as u64;
                let inv = &self.inventory[site as usize];
                let k = self.slots[site as usize] as usize;
                let draws: Vec<u32> = match self.config.slot_model {
                    SlotModel::SlotsPerView => (0..k).map(|_| inv[rng.gen_range(0..inv.len())]).collect(),
                    SlotModel::CampaignsPerSite => inv.clone(),
                };
                let shown_static = draws.len().saturating_sub(targeted[v].len());
                for &campaign in targeted[v].iter().chain(&draws[..shown_static]) {
                    log.push(Impression {
                        campaign,
                        site,
                        timestamp,
                    });
                }
            }
            visits.push(nv as u32);
            impressions.push(log);
        }
        WeekLog {
            week,
            visits,
            impressions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            num_users: 60,
            num_websites: 200,
            num_campaigns: 100,
            ..SimConfig::default()
        }
    }

    #[test]
    fn campaign_mix() {
        let w = generate_world(&SimConfig::default());
        assert_eq!(w.campaigns().len(), 500);
        assert_eq!(w.campaigns().iter().filter(|c| c.is_targeted()).count(), 50);
        for c in w.campaigns() {
            match &c.kind {
                CampaignKind::Static { sites } => assert!(!sites.is_empty()),
                CampaignKind::Targeted { audience, cap } => {
                    assert!(!audience.is_empty());
                    assert_eq!(*cap, 7);
                }
            }
        }
        for site in 0..1000 {
            assert!(!w.inventory(site).is_empty());
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_world(&small());
        let b = generate_world(&small());
        assert_eq!(a.campaigns(), b.campaigns());
        assert_eq!(a.simulate_week(0), b.simulate_week(0));
        assert_ne!(a.simulate_week(0), a.simulate_week(1));
        let other = generate_world(&SimConfig { seed: 2, ..small() });
        assert_ne!(a.simulate_week(0), other.simulate_week(0));
    }

    #[test]
    fn cap_bounds_targeted_impressions() {
        let w = generate_world(&small());
        for cap in [1, 3] {
            let log = w.simulate_week_with_cap(0, cap);
            for (user, imps) in log.impressions.iter().enumerate() {
                let mut per: HashMap<u32, u32> = HashMap::new();
                for i in imps.iter().filter(|i| w.campaigns()[i.campaign as usize].is_targeted()) {
                    assert_eq!(w.label(user as u32, i.campaign), Label::Targeted);
                    *per.entry(i.campaign).or_default() += 1;
                }
                let total: u32 = per.values().sum();
                assert!(total <= cap * w.targeting(user as u32).len() as u32);
                assert!(per.values().all(|&n| n <= cap));
                if log.visits[user] as usize >= cap as usize {
                    assert_eq!(per.len(), w.targeting(user as u32).len());
                }
            }
        }
    }

    #[test]
    fn raising_the_cap_only_adds_targeted_impressions() {
        let w = generate_world(&small());
        let lo = w.simulate_week_with_cap(0, 2);
        let hi = w.simulate_week_with_cap(0, 5);
        assert_eq!(lo.visits, hi.visits);
        for (a, b) in lo.impressions.iter().zip(&hi.impressions) {
            let t = |v: &Vec<Impression>| -> BTreeSet<(u32, u64)> {
                v.iter()
                    .filter(|i| w.campaigns()[i.campaign as usize].is_targeted())
                    .map(|i| (i.campaign, i.timestamp))
                    .collect()
            };
            assert!(t(a).is_subset(&t(b)));
        }
    }

    #[test]
    fn visit_counts_track_the_mean() {
        let mut means = Vec::new();
        for seed in 1..=3 {
            let w = generate_world(&SimConfig { seed, ..SimConfig::default() });
            let log = w.simulate_week(0);
            means.push(log.visits.iter().map(|&v| v as f64).sum::<f64>() / log.visits.len() as f64);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!((mean - 138.0).abs() <= 0.05 * 138.0, "{mean}");
    }

    #[test]
    fn impressions_match_slot_oracle() {
        // without targeting every page view shows exactly the site's slot count
        let c = SimConfig {
            targeted_fraction: 0.0,
            ..small()
        };
        let w = generate_world(&c);
        let log = w.simulate_week(0);
        for imps in &log.impressions {
            let mut per_view: HashMap<u64, (u32, usize)> = HashMap::new();
            for i in imps {
                let e = per_view.entry(i.timestamp).or_insert((i.site, 0));
                e.1 += 1;
            }
            for (site, n) in per_view.values() {
                assert_eq!(*n, w.slots(*site) as usize);
            }
        }
        let mean_slots = (0..200).map(|s| w.slots(s) as f64).sum::<f64>() / 200.0;
        assert!((mean_slots - 20.0).abs() < 1.0, "{mean_slots}");
    }

    #[test]
    fn stress_users_stay_on_stress_sites() {
        let c = SimConfig {
            stress: Some(Default::default()),
            ..SimConfig::default()
        };
        let w = generate_world(&c);
        let stressed: Vec<u32> = (0..500).filter(|&u| w.is_stressed(u)).collect();
        assert_eq!(stressed.len(), 50);
        let sites = w.browsable_sites(stressed[0]).to_vec();
        assert_eq!(sites.len(), 20);
        assert!(sites.iter().all(|&s| s >= 500));
        let shared: BTreeSet<u32> = w.inventory(sites[0]).iter().copied().collect();
        for s in &sites {
            let inv: BTreeSet<u32> = w.inventory(*s).iter().copied().collect();
            assert!(inv.intersection(&shared).count() >= 5);
        }
    }

    #[test]
    fn campaigns_per_site_model() {
        let c = SimConfig {
            slot_model: SlotModel::CampaignsPerSite,
            ..small()
        };
        let w = generate_world(&c);
        for site in 0..200 {
            assert_eq!(w.slots(site) as usize, w.inventory(site).len());
        }
        assert!(w.simulate_week(0).total_impressions() > 0);
    }
}
