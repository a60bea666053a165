use nalgebra::DMatrix;

use peftt::data::{synthetic_splits, SyntheticSpec};
use peftt::encoder::ModelFamily;
use peftt::scenario::Mode;
use peftt::training::{PromptSpec, Scenario, Trainer};

// After training, every weight update B·A must still have rank <= r: singular
// values past the r-th vanish up to float noise.
#[test]
fn trained_updates_stay_within_rank() {
    let corpus = synthetic_splits(4, 10, &SyntheticSpec::default(), 4).unwrap();
    let prompt = PromptSpec::default_for(&corpus.label_names).unwrap();
    for rank in [1, 3, 8] {
        let mut scenario = Scenario::desk(ModelFamily::Cino, Mode::AdapterPrompt);
        scenario.hyper.rank = rank;
        scenario.hyper.lr = 1e-2;
        scenario.hyper.batch_size = 8;
        let mut trainer = Trainer::prepare(&scenario, &corpus, Some(&prompt)).unwrap();
        for epoch in 0..3 {
            trainer.train_epoch(epoch).unwrap();
        }
        let model = trainer.model();
        for pair in model.adapters().unwrap().pairs() {
            let b = model.params().get(pair.b);
            let a = model.params().get(pair.a);
            let (d_out, r) = b.matrix_dims();
            let (r2, d_in) = a.matrix_dims();
            assert_eq!((r, r2), (rank, rank));
            let b = DMatrix::from_row_iterator(d_out, r, b.data().iter().map(|&x| x as f64));
            let a = DMatrix::from_row_iterator(r, d_in, a.data().iter().map(|&x| x as f64));
            let delta = &b * &a;
            let mut sv: Vec<f64> = delta.singular_values().iter().copied().collect();
            sv.sort_by(|x, y| y.total_cmp(x));
            assert!(sv[0] > 0.0, "update at {:?} is still zero", pair.site);
            for &s in &sv[rank..] {
                assert!(s <= 1e-9 * sv[0], "rank {rank} update at {:?} has singular values {sv:?}", pair.site);
            }
        }
    }
}
