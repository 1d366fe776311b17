use proptest::prelude::*;
use shield_core::evalkit::{chair, mme_eval, pope_eval, Prediction};
use shield_core::numerics::{read_tensor, softmax, write_tensor, Tensor};
use shield_core::shield::{contrastive_step, reweight, similarity_matrix, token_weights, Plausibility};
use shield_core::toymodel::{Answer, ObjectClass, Token};

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-30.0f64..30.0, n)
}

fn pred() -> impl Strategy<Value = Prediction> {
    prop_oneof![Just(Prediction::Yes), Just(Prediction::No), Just(Prediction::Other)]
}

fn label() -> impl Strategy<Value = Answer> {
    prop_oneof![Just(Answer::Yes), Just(Answer::No)]
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(l in logits(25)) {
        let p = softmax(&l).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn contrast_is_a_distribution_with_argmax_of_clean_kept(
        lc in logits(25), la in logits(25), alpha in 0.0f64..3.0, beta in 0.0f64..=1.0
    ) {
        for src in [Plausibility::Clean, Plausibility::Contrastive] {
            let p = contrastive_step(&lc, &la, alpha, beta, src).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }
        // The clean argmax always survives the clean-softmax cut.
        let p = contrastive_step(&lc, &la, alpha, beta, Plausibility::Clean).unwrap();
        let top = shield_core::numerics::argmax(&lc).unwrap();
        prop_assert!(p[top] > 0.0);
    }

    #[test]
    fn zero_alpha_zero_beta_is_plain_softmax(lc in logits(25), la in logits(25)) {
        let p = contrastive_step(&lc, &la, 0.0, 0.0, Plausibility::Clean).unwrap();
        let q = softmax(&lc).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_weights_lie_in_unit_interval(
        v in proptest::collection::vec(0.1f64..1.0, 12), c in proptest::collection::vec(0.1f64..1.0, 8)
    ) {
        let vt = Tensor::new(vec![3, 4], v).unwrap();
        let ct = Tensor::new(vec![2, 4], c).unwrap();
        let w = token_weights(&similarity_matrix(&vt, &ct).unwrap()).unwrap();
        prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
        let r = reweight(&vt, &w).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                prop_assert!((r.row(i)[k] - vt.row(i)[k] * (1.0 + w[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pope_ignores_order(rows in proptest::collection::vec((pred(), label()), 1..30), rot in 0usize..30) {
        let mut shuffled = rows.clone();
        let r = rot % rows.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        prop_assert_eq!(pope_eval(&rows).unwrap(), pope_eval(&shuffled).unwrap());
    }

    #[test]
    fn chair_ignores_caption_order(
        caps in proptest::collection::vec(
            (proptest::collection::btree_set(0usize..16, 0..4), proptest::collection::btree_set(0usize..16, 0..4)),
            1..10
        )
    ) {
        let items: Vec<(Vec<Token>, Vec<ObjectClass>)> = caps
            .iter()
            .map(|(said, gt)| {
                let mut t = vec![Token::A, Token::Photo, Token::Of];
                for (i, o) in said.iter().enumerate() {
                    if i > 0 {
                        t.push(Token::And);
                    }
                    t.push(Token::Object(ObjectClass::new(*o).unwrap()));
                }
                t.push(Token::Eos);
                (t, gt.iter().map(|o| ObjectClass::new(*o).unwrap()).collect())
            })
            .collect();
        let mut rev = items.clone();
        rev.reverse();
        prop_assert_eq!(chair(&items).unwrap(), chair(&rev).unwrap());
    }

    #[test]
    fn mme_ignores_image_order(
        groups in proptest::collection::vec(((pred(), label()), (pred(), label())), 1..10)
    ) {
        let pairs: Vec<(String, Vec<(Prediction, Answer)>)> = groups
            .iter()
            .enumerate()
            .map(|(i, (a, b))| (format!("img{i}"), vec![*a, *b]))
            .collect();
        let mut rev = pairs.clone();
        rev.reverse();
        let (x, y) = (mme_eval(&pairs).unwrap(), mme_eval(&rev).unwrap());
        prop_assert!((x.combined - y.combined).abs() < 1e-9);
        prop_assert!((0.0..=200.0).contains(&x.combined));
    }

    #[test]
    fn tensor_file_round_trips(
        shape in proptest::collection::vec(1usize..5, 0..4),
        seed in any::<u64>()
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
        let t = Tensor::new(shape, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let back = read_tensor(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &t);
        buf.push(0);
        prop_assert!(read_tensor(buf.as_slice()).is_err());
    }
}
