use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trafficq_core::fluid::*;
use trafficq_core::scenario::random_arterial;

fn main() {
    let scenario = random_arterial(1);
    let net = &scenario.network;
    let scheds = fluid_schedules(&scenario).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let x0: Vec<f64> = (0..net.n_movements()).map(|_| rng.random_range(0.0..8.0)).collect();
    let g = 3.0;
    let horizon = 7200.0;

    let base = integrate(net, &scheds, &x0, horizon, FluidOptions::default()).unwrap();
    let sped_scheds: Vec<_> = scheds.iter().map(|s| speed_schedule(s, g)).collect();
    let sped_x0: Vec<f64> = x0.iter().map(|x| x / g).collect();
    let mut sped_net = net.clone();
    for link in &mut sped_net.links {
        link.travel_time_s /= g;
    }
    let sped = integrate(&sped_net, &sped_scheds, &sped_x0, horizon / g, FluidOptions::default()).unwrap();

    // March in fine steps over sped time; find first divergence > 1e-9 for any movement.
    let mut t = 0.0;
    'outer: while t < horizon / g {
        for mi in 0..net.n_movements() {
            let want = base.queue_at(mi, g * t) / g;
            let got = sped.queue_at(mi, t);
            if (got - want).abs() / (1.0 + want) > 1e-9 {
                println!("first divergence: movement {mi} ({}) at sped-t {t}: want {want} got {got}", net.movements[mi].key());
                // dump rates around it
                for dt in [-1.0, -0.5, -0.1, 0.0, 0.1] {
                    let ts = t + dt;
                    if ts < 0.0 { continue; }
                    println!("  sped-t {ts:.3}: base b={:.6} a={:.6} | sped b={:.6} a={:.6} | c_base(gt)={:.2} c_sped(t)={:.2}",
                        base.departure_rate_at(mi, g*ts)*3600.0, base.admitted_rate_at(mi, g*ts)*3600.0,
                        sped.departure_rate_at(mi, ts)*3600.0, sped.admitted_rate_at(mi, ts)*3600.0,
                        scheds[mi].rate_at(g*ts), sped_scheds[mi].rate_at(ts));
                }
                break 'outer;
            }
        }
        t += 0.25;
    }
}
