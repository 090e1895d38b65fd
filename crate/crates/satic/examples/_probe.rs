use satic::data::Vocabulary;
use satic::decoding::measure_latency;
use satic::model::{Model, ModelConfig, RegionFeatures};
use satic::SplitMix64;

fn main() {
    let mut rng = SplitMix64::new(13);
    let config = ModelConfig { max_len: 4, ..ModelConfig::desk(37) };
    let mut model = Model::new(config, 13).unwrap();
    model.param_mut("out_proj.b").unwrap().values_mut()[Vocabulary::END] = -1e9;
    let items: Vec<RegionFeatures> = (0..32)
        .map(|_| {
            let data: Vec<f64> = (0..32).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            RegionFeatures::new(1, 32, data).unwrap()
        })
        .collect();
    for run in 0..8 {
        let sizes = [1usize, 8, 16, 32];
        let mut floors = [f64::INFINITY; 4];
        for _round in 0..64 {
            for (si, &b) in sizes.iter().enumerate() {
                let st = measure_latency(&model, &items[..b], 1, b, 1).unwrap().mean_ms;
                if st < floors[si] {
                    floors[si] = st;
                }
            }
        }
        let m8 = (floors[1] / floors[0] - 1.0) * 100.0;
        let m16 = (floors[2] / floors[1] - 1.0) * 100.0;
        let m32 = (floors[3] / floors[2] - 1.0) * 100.0;
        println!(
            "run={run} b1={:.4} b8={:.4} b16={:.4} b32={:.4}  margins {m8:+.2}% {m16:+.2}% {m32:+.2}%",
            floors[0], floors[1], floors[2], floors[3]
        );
    }
}
