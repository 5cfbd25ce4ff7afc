// Dev probe: normalized domain with omega0 = 30 vs raw domain omega0 = 5.
use molfield::fieldgen::GridSpec;
use molfield::fixtures;
use molfield::mnf::{fit_mnf, FitOptions, SirenArch};
use molfield::molio::{Atom, Conformer};

fn main() {
    let m = fixtures::methane();
    let r = m.bounding_radius(2.0);
    let scaled = Conformer::new(
        m.atoms()
            .iter()
            .map(|a| Atom {
                element: a.element,
                position: [a.position[0] / r, a.position[1] / r, a.position[2] / r],
            })
            .collect(),
        "methane-unit",
    )
    .unwrap();
    let vocab = fixtures::methane_vocab();
    let grid = GridSpec::for_conformer(&scaled, 3, 8, 2.0 / r);
    for (omega0, lr) in [(30.0, 1e-2), (30.0, 3e-3), (15.0, 1e-2)] {
        let arch = SirenArch::new(vec![64, 64, 64], vocab.k(), omega0).unwrap();
        let opts = FitOptions { steps: 2000, lr, cosine_decay: true, seed: 0 };
        let fit = fit_mnf(&scaled, &vocab, &grid, &arch, &opts).unwrap();
        let tail: f64 = fit.loss_history[1900..].iter().sum::<f64>() / 100.0;
        println!("normalized omega0 {omega0} lr {lr:.0e}: tail {:.5} (≈{:.4} Å)", tail, tail * r);
    }
}
