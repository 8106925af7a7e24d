use proptest::prelude::*;

use barmorph::config::KeyValues;
use barmorph::decode::{nucleus_distribution, tempered_softmax, window_starts, AttributeOverride, OverrideSpec};
use barmorph::midi::{Bar, Note, QuantizedScore, TempoMark, MAX_DURATION_UNITS, PITCH_MAX, PITCH_MIN, TEMPO_CLASSES, VELOCITY_CLASSES};
use barmorph::remi::{bar_slices, detokenize, tokenize, Vocab};

fn note(sub_beats: u16) -> impl Strategy<Value = Note> {
    (0..sub_beats, PITCH_MIN..=PITCH_MAX, 0..VELOCITY_CLASSES, 1..=MAX_DURATION_UNITS).prop_map(
        |(sub_beat, pitch, velocity_class, duration_units)| Note {
            sub_beat,
            pitch,
            velocity_class,
            duration_units,
        },
    )
}

fn score() -> impl Strategy<Value = QuantizedScore> {
    prop_oneof![Just(16u16), Just(32u16)].prop_flat_map(|sb| {
        let bar = (
            prop::collection::vec(note(sb), 0..10),
            prop::collection::vec((0..sb, 0..TEMPO_CLASSES as u8), 0..3),
        )
            .prop_map(|(notes, tempos)| Bar {
                notes,
                tempos: tempos.into_iter().map(|(sub_beat, class)| TempoMark { sub_beat, class }).collect(),
            });
        prop::collection::vec(bar, 1..6).prop_map(move |bars| QuantizedScore::new(sb, bars))
    })
}

fn shift() -> impl Strategy<Value = AttributeOverride> {
    prop_oneof![(0u8..12).prop_map(AttributeOverride::Set), (-9i32..9).prop_map(AttributeOverride::Shift)]
}

proptest! {
    #[test]
    fn tokens_round_trip(q in score()) {
        let vocab = Vocab::new(q.sub_beats_per_bar);
        let seq = tokenize(&q, &vocab).unwrap();
        prop_assert_eq!(seq.n_bars(), q.n_bars());
        prop_assert_eq!(bar_slices(&seq.tokens).len(), q.n_bars());
        let back = detokenize(&seq.tokens, &vocab).unwrap();
        prop_assert_eq!(back.skipped, 0);
        prop_assert_eq!(back.score, q);
    }

    #[test]
    fn detokenize_never_panics(ids in prop::collection::vec(0u32..400, 0..200)) {
        let vocab = Vocab::new(16);
        if let Ok(d) = detokenize(&ids, &vocab) {
            prop_assert!(d.score.validate().is_ok());
        }
    }

    #[test]
    fn overrides_stay_in_range(src in prop::collection::vec(0u8..8, 1..20), o in shift()) {
        let out = OverrideSpec::Uniform(o).resolve(&src).unwrap();
        prop_assert_eq!(out.len(), src.len());
        prop_assert!(out.iter().all(|&c| c < 8));
        let text = o.to_string();
        prop_assert_eq!(text.parse::<AttributeOverride>().unwrap(), o);
    }

    #[test]
    fn per_bar_overrides_need_matching_length(src in prop::collection::vec(0u8..8, 1..10), extra in 1usize..3) {
        let spec = OverrideSpec::PerBar(vec![AttributeOverride::Shift(0); src.len() + extra]);
        prop_assert!(spec.resolve(&src).is_err());
    }

    #[test]
    fn windows_cover_the_piece(k in 1usize..200, k_w in 2usize..20) {
        let starts = window_starts(k, k_w);
        prop_assert_eq!(starts[0], 0);
        prop_assert!(*starts.last().unwrap() < k);
        prop_assert!(starts.last().unwrap() + k_w >= k);
        for w in starts.windows(2) {
            prop_assert_eq!(w[1] - w[0], (k_w / 2).max(1));
        }
    }

    #[test]
    fn nucleus_is_a_distribution(logits in prop::collection::vec(-20.0f64..20.0, 1..40), p in 0.05f64..=1.0, tau in 0.1f64..4.0) {
        let probs = tempered_softmax(&logits, tau);
        let dist = nucleus_distribution(&logits, p, tau);
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let kept: f64 = probs.iter().zip(&dist).filter(|(_, &d)| d > 0.0).map(|(q, _)| q).sum();
        prop_assert!(kept >= p - 1e-9 || dist.iter().filter(|&&d| d > 0.0).count() == probs.iter().filter(|&&q| q > 0.0).count());
        let top = probs.iter().cloned().fold(0.0, f64::max);
        prop_assert!(probs.iter().zip(&dist).any(|(&q, &d)| q == top && d > 0.0));
    }

    #[test]
    fn key_values_round_trip(entries in prop::collection::btree_map("[a-z]{1,6}\\.[a-z_]{1,8}", -1e6f64..1e6, 0..10)) {
        let mut kv = KeyValues::default();
        for (k, v) in &entries {
            kv.insert(k.clone(), v);
        }
        let text: String = kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let back = KeyValues::parse(&text).unwrap();
        for (k, v) in &entries {
            prop_assert_eq!(back.get::<f64>(k).unwrap(), Some(*v));
        }
    }
}
