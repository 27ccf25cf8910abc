//! Registers the synthetic two-room scene and prints per-iteration RMSE.
//!
//! `cargo run --release --example two_room -- <seed> [key=value ...]`
//!
//! Set `LOG=1` to print the energy terms and the solver log of every iteration.

use std::time::Instant;

use fine2coarse::bench::{offset_histogram, resolve_benchmark, rmse};
use fine2coarse::ingest::synth::{perturb_trajectory, plant_benchmark, synth_scene, two_room_scene};
use fine2coarse::pairwise::odometry_matches;
use fine2coarse::pipeline::{PipelineConfig, Registration};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let t = Instant::now();
    let scene = two_room_scene(seed);
    let seq = synth_scene(&scene, seed).expect("scene renders");
    let local = perturb_trajectory(&seq.ground_truth, scene.drift.as_ref().expect("drift"), seed);
    let matches = odometry_matches(&seq.frames, &local, 200, seed);
    let plan = scene.benchmark.as_ref().expect("benchmark");
    let entries = plant_benchmark(&scene, &seq.world_poses, plan, seed);
    let bench = resolve_benchmark(&entries, &seq.frames).expect("benchmark resolves");
    let corrs = &bench.correspondences;
    println!("synth {:.1}s, {} correspondences, {} dropped", t.elapsed().as_secs_f64(), corrs.len(), bench.dropped);
    let mut config = PipelineConfig { seed, ..Default::default() };
    for kv in std::env::args().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        config.set(k, v).expect("valid override");
    }
    let t = Instant::now();
    let mut run = Registration::new(&seq.frames, &config, Some(&matches)).expect("preprocess");
    println!("preprocess {:.1}s, T0 rmse {:.4}", t.elapsed().as_secs_f64(), rmse(&run.pre.initial, corrs).unwrap());
    let h0 = offset_histogram(&run.pre.initial, corrs, None).unwrap();
    while let Some(s) = run.step().expect("iteration") {
        println!(
            "it {} l={} prox={} cop={} rel={} samp={} corr={}/{} E {:.3e}->{:.3e} inner={} stop={:?} rmse {:.4} t={:.1}s",
            s.iteration,
            s.window_length,
            s.proxies,
            s.coplanarity,
            s.relations,
            s.plane_samples,
            s.correspondences,
            s.raw_correspondences,
            s.report.initial.total,
            s.report.final_energy.total,
            s.report.iterations,
            s.report.stop,
            rmse(&s.poses, corrs).unwrap(),
            t.elapsed().as_secs_f64()
        );
        if std::env::var("LOG").is_ok() {
            let e = &s.report.final_energy;
            println!("   H {:.2} G {:.2} P {:.2} C {:.2} L {:.2} I {:.2}", e.e_h, e.e_g, e.e_p, e.e_c, e.e_l, e.e_i);
            for r in &s.report.log {
                println!("   {} E {:.4e} lambda {:.1e} acc {} cg {}", r.iteration, r.energy.total, r.damping, r.accepted, r.cg_iterations);
            }
        }
    }
    let h1 = offset_histogram(&run.state.poses, corrs, None).unwrap();
    for (a, b) in h0.bins.iter().zip(&h1.bins) {
        println!("bin {:>3}-{:<3} n={:>3} {:.4} -> {:.4}", a.lo, a.hi, a.count, a.mean_error, b.mean_error);
    }
    println!("final T0={:.4} rmse={:.4}", rmse(&run.pre.initial, corrs).unwrap(), rmse(&run.state.poses, corrs).unwrap());
}
