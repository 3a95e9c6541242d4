use hqdm_core::diffusion::*;
use hqdm_core::rng;
use hqdm_core::Tensor;

fn run_grid(net: &ToyDenoiser, sched: &NoiseSchedule, ts: &[usize], n: usize, seed: u64, renorm: bool) -> Tensor {
    let mut r = rng::stream(seed, "sample-noise");
    let mut x = Tensor::new(&[n,1,16,16], rng::fill_normal(&mut r, n*256)).unwrap();
    let per = 256usize;
    for (i, &t) in ts.iter().enumerate() {
        let mut eh = net.forward(&x, &vec![t; n]).unwrap();
        let abar_t = sched.alpha_bar(t).unwrap();
        if renorm && abar_t < 0.5 {
            let mut d = eh.data().to_vec();
            for bi in 0..n {
                let seg = &mut d[bi*per..(bi+1)*per];
                let m = seg.iter().sum::<f64>() / per as f64;
                let sd = (seg.iter().map(|v| (v-m)*(v-m)).sum::<f64>() / per as f64).sqrt();
                if sd > 1.0 {
                    let k = 1.0 / sd;
                    for v in seg.iter_mut() { *v = m + (*v - m) * k; }
                }
            }
            eh = Tensor::new(eh.shape(), d).unwrap();
        }
        let abar_p = if i+1 < ts.len() { sched.alpha_bar(ts[i+1]).unwrap() } else { 1.0 };
        x = ddim_step(&x, &eh, abar_t, abar_p).unwrap();
    }
    x
}

fn vstat(t: &Tensor) -> (f64, f64) {
    let m = t.mean();
    (m, t.data().iter().map(|x| (x-m)*(x-m)).sum::<f64>() / t.numel() as f64)
}

fn main() {
    let cfg = TeacherConfig::default();
    let (net, sched, _m) = train_teacher(&cfg).unwrap();
    let data = SyntheticDataset::batch(&mut rng::stream(1234, "probe-data"), 256);
    let (dm, dv) = vstat(&data);
    println!("data: mean {dm:.4} var {dv:.4}");

    let fine: Vec<usize> = (0..100).rev().collect();
    let coarse: Vec<usize> = (0..20).map(|i| i*5).rev().collect();
    let mid: Vec<usize> = (0..50).map(|i| i*2).rev().collect();
    for (name, grid) in [("fine100", &fine), ("mid50", &mid), ("coarse20", &coarse)] {
        for renorm in [false, true] {
            let s = run_grid(&net, &sched, grid, 192, 777, renorm);
            let (m, v) = vstat(&s);
            println!("{name:8} renorm={renorm}: mean {m:.4} (rel {:.3}) var {v:.4} (rel {:.3})",
                (m-dm).abs()/dm.abs(), (v-dv).abs()/dv);
        }
    }
}
