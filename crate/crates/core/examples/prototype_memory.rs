//! The dataset-level prototype memory as a running mean, and the contrastive
//! loss that pulls each batch prototype toward its class entry.

use candle_core::{Device, Tensor};
use datr::cpa::{prototypes_from, DomainLabel};
use datr::das::{contrastive_loss, DatasetPrototypes};

fn main() -> datr::Result<()> {
    let dev = Device::Cpu;
    let mut mem = DatasetPrototypes::new(3, 2);
    let batches = [
        (vec![[1.0, 0.0], [1.2, 0.2], [0.0, 1.0]], vec![0, 0, 1], DomainLabel::Source),
        (vec![[0.8, -0.2], [-1.0, -1.0], [0.2, 0.8]], vec![0, 2, 1], DomainLabel::Target),
    ];
    for (rows, classes, domain) in &batches {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let z = Tensor::from_vec(flat, (rows.len(), 2), &dev)?;
        let p = prototypes_from(&z, classes, 3, *domain)?;
        if !mem.is_empty() {
            let other = p.clone();
            println!("contrastive before update: {:.5}", contrastive_loss(&p, &other, &mem, 1.0)?.to_scalar::<f64>()?);
        }
        mem.update(&p)?;
        println!("after {} batch: counts {:?}", domain.name(), mem.counts());
    }
    for c in 0..3 {
        println!("class {c}: {:?}", mem.row(c));
    }
    let path = std::env::temp_dir().join("datr_memory.bin");
    mem.persist(&path)?;
    assert_eq!(DatasetPrototypes::restore(&path)?, mem);
    println!("memory round-tripped through {}", path.display());
    Ok(())
}
