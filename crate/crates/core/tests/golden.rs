use std::path::PathBuf;

use chunkspeech::speechlm::{SpeechLm, SpeechLmConfig};
use chunkspeech::vocab::{SpeechSlot, StepTokens, TextSlot};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy_logits.json")
}

/// Eight steps: four text-only delay steps, then speech groups, then a PAD text slot.
fn fixed_input() -> Vec<StepTokens> {
    (0..8)
        .map(|s| {
            let text = if s < 7 { TextSlot::Token(s as u32 * 4) } else { TextSlot::Pad };
            let speech = if s < 4 {
                vec![SpeechSlot::Pad; 4]
            } else {
                (0..4).map(|j| SpeechSlot::Code((s * 7 + j * 3) as u32 % 64)).collect()
            };
            StepTokens { text, speech }
        })
        .collect()
}

fn logits() -> Vec<Vec<Vec<f64>>> {
    let model = SpeechLm::new(SpeechLmConfig::toy(), 2024).unwrap();
    let out = model.forward(&fixed_input()).unwrap();
    out.lane_logits.iter().map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect()).collect()
}

#[test]
fn toy_model_logits_match_recorded_values() {
    let actual = logits();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), serde_json::to_string(&actual).unwrap()).unwrap();
    }
    let expected: Vec<Vec<Vec<f64>>> =
        serde_json::from_str(&std::fs::read_to_string(golden_path()).expect("golden file")).unwrap();
    assert_eq!(actual.len(), expected.len());
    for (lane, (a, e)) in actual.iter().zip(&expected).enumerate() {
        assert_eq!(a.len(), 8);
        for (row_a, row_e) in a.iter().zip(e) {
            assert_eq!(row_a.len(), row_e.len());
            for (x, y) in row_a.iter().zip(row_e) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "lane {lane}: {x} vs {y}");
            }
        }
    }
}
