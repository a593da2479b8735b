mod common;

use std::fs;

use omni_core::sequencer::{chat_template, render_segments, token_budget, AudioRef, ImageRef, Role, Segment};
use omni_core::tokenizer::{default_specials, TokenizerModel};

#[test]
fn chat_template_matches_golden() {
    let tok = TokenizerModel::byte_level(default_specials());
    let turns = vec![
        (Role::System, vec![Segment::Text(tok.encode("You are a helpful assistant."))]),
        (
            Role::User,
            vec![
                Segment::Image(ImageRef::Size { width: 1024, height: 1024 }),
                Segment::Text(tok.encode("What is shown here, and what do you hear?")),
                Segment::Audio(AudioRef::Length {
                    num_samples: 75 * 16000,
                    sample_rate: 16000,
                }),
            ],
        ),
        (Role::Assistant, vec![Segment::Text(tok.encode("A city skyline and rain."))]),
    ];
    let segs = chat_template(&turns, &tok).unwrap();
    let rendered = render_segments(&segs, &tok);
    let budget = token_budget(&segs).unwrap();
    let text = format!(
        "{rendered}\n--\ntext {} vision {} audio {} markers {} total {}\n",
        budget.text,
        budget.vision,
        budget.audio,
        budget.markers,
        budget.total()
    );
    let path = common::golden_dir().join("chat_template.txt");
    if std::env::var_os("OMNI_BLESS").is_some() {
        fs::write(&path, &text).unwrap();
    }
    assert_eq!(text, fs::read_to_string(&path).expect("golden missing; run with OMNI_BLESS=1 once"));
    assert_eq!((budget.vision, budget.audio, budget.markers), (320, 3750, 4));
}
