use std::time::Instant;

use hlsqor::corpus;
use hlsqor::dataset::{generate, Stage};
use hlsqor::features::OpLibrary;
use hlsqor::ir::enumerate_configs;

fn main() {
    let lib = OpLibrary::default();
    let factors = [1, 2, 4, 8];
    for k in corpus::training().unwrap().iter().chain(&corpus::held_out().unwrap()) {
        println!("{:10} configs {}", k.name, enumerate_configs(k, &factors).len());
    }
    let t = Instant::now();
    let ds = generate(&corpus::training().unwrap(), &factors, &lib, 0).unwrap();
    println!("generate {:?}", t.elapsed());
    for st in Stage::ALL {
        let s = ds.stage(st);
        let nodes: usize = s.iter().map(|x| x.graph.nodes.len()).sum();
        let max = s.iter().map(|x| x.graph.nodes.len()).max().unwrap_or(0);
        println!("{st:9} samples {:5} mean nodes {:6.1} max {max}", s.len(), nodes as f64 / s.len().max(1) as f64);
    }
    println!("{:?}", ds.manifest.duplicates);
}
