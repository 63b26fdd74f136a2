use mixbart::config::Schedule;
use mixbart::rng::RngStream;
use mixbart::simlab::*;
use mixbart::store::PosteriorStore;

fn main() {
    let config = SimConfig {
        days: 15,
        lattice: LatticeConfig { rows: 2, cols: 3, ..LatticeConfig::default() },
        schedule: Schedule { burnin: 40, samples: 20, thin: 2, seed: 0 },
        ..SimConfig::default()
    };
    let mut rng = RngStream::new(16_000, 0);
    let (data, car, _) = generate_replicate(&config, &mut rng).unwrap();
    let setting = BartSetting { trees: 5, soft: true, sparse: true };
    let store = fit_replicate(&data, &car, setting, config.schedule, 16_001, 3).unwrap();
    store.persist(std::path::Path::new("/tmp/s1")).unwrap();
    PosteriorStore::load(std::path::Path::new("/tmp/s1")).unwrap().persist(std::path::Path::new("/tmp/s3")).unwrap();
    let a = std::fs::read_to_string("/tmp/s1/trees.jsonl").unwrap();
    let b = std::fs::read_to_string("/tmp/s3/trees.jsonl").unwrap();
    for (la, lb) in a.lines().zip(b.lines()) {
        if la != lb {
            for (i, (ca, cb)) in la.chars().zip(lb.chars()).enumerate() {
                if ca != cb {
                    println!("first diff at col {i}:");
                    println!("  a: ...{}", &la[i.saturating_sub(40)..(i + 30).min(la.len())]);
                    println!("  b: ...{}", &lb[i.saturating_sub(40)..(i + 30).min(lb.len())]);
                    return;
                }
            }
            println!("length diff: {} vs {}", la.len(), lb.len());
            return;
        }
    }
    println!("identical");
}
