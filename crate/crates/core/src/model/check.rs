use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;
use crate::model::{ClassifierConfig, ImageClassifier, Muisc, MuiscConfig, SequenceSample};
use crate::nn::grad_check_params;

/// Finite-difference check of every parameter of a tiny sequence model and
/// a tiny image classifier on random inputs. Returns `(name, max relative
/// error)` per parameter, prefixed with `muisc/` or `classifier/`.
pub fn grad_check_report(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = |h: usize, w: usize| Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect());

    let cfg = MuiscConfig {
        init_seed: seed,
        ..MuiscConfig::tiny()
    };
    let m = Muisc::new(cfg.clone())?;
    let sample = SequenceSample {
        images: (0..cfg.seq_len)
            .map(|_| image(cfg.image_height, cfg.image_width))
            .collect::<Result<_>>()?,
        title: vec![17, 13, 28],
        feedback: vec![8, 4, 6],
        label: 1,
    };
    let mut out: Vec<(String, f64)> =
        grad_check_params(m.store(), |ctx| Ok(m.sample_losses(ctx, &sample)?.total), 1e-5)?
            .into_iter()
            .map(|(n, e)| (format!("muisc/{n}"), e))
            .collect();

    let ccfg = ClassifierConfig {
        image_height: 8,
        image_width: 8,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        init_std: 0.5,
        init_seed: seed,
        ..Default::default()
    };
    let c = ImageClassifier::new(ccfg)?;
    let img = image(8, 8)?;
    out.extend(
        grad_check_params(c.store(), |ctx| c.loss(ctx, &img, true), 1e-5)?
            .into_iter()
            .map(|(n, e)| (format!("classifier/{n}"), e)),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harness_covers_both_models_and_passes() {
        let r = grad_check_report(3).unwrap();
        assert!(r.iter().any(|(n, _)| n.starts_with("muisc/dec.")));
        assert!(r.iter().any(|(n, _)| n.starts_with("classifier/head")));
        for (n, e) in r {
            assert!(e < 1e-4, "{n}: {e}");
        }
    }
}
