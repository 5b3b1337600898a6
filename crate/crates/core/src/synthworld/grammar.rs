//! Stochastic caption grammar over scenes.
//!
//! Shape: `<count?> <color?> <category>(s) [and ...] <context phrase>`.
//! Color and count words are each mentioned with probability 0.7, so the
//! references are deliberately only partially specific — that gap is where
//! the discriminability objective gets its headroom.

use rand::Rng;

use super::{Scene, SceneObject, CATEGORIES, COLORS, MAX_COUNT};

pub const MENTION_PROB: f64 = 0.7;

const COUNT_WORDS: [&str; MAX_COUNT] = ["a", "two", "three", "four"];
const VAGUE_COUNT: &str = "some";

const CONTEXTS: [&str; 5] = [
    "on the table",
    "near the window",
    "in the corner",
    "on the floor",
    "by the wall",
];

fn render_object(o: &SceneObject, mention_count: bool, mention_color: bool, out: &mut String) {
    if o.count == 1 {
        out.push_str("a");
    } else if mention_count {
        out.push_str(COUNT_WORDS[o.count - 1]);
    } else {
        out.push_str(VAGUE_COUNT);
    }
    if mention_color {
        out.push(' ');
        out.push_str(COLORS[o.color]);
    }
    out.push(' ');
    out.push_str(CATEGORIES[o.category]);
    if o.count > 1 {
        out.push('s');
    }
}

fn render_scene<R: Rng>(scene: &Scene, rng: &mut R) -> String {
    let mut out = String::new();
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            out.push_str(" and ");
        }
        let mention_count = rng.random_bool(MENTION_PROB);
        let mention_color = rng.random_bool(MENTION_PROB);
        render_object(o, mention_count, mention_color, &mut out);
    }
    out.push(' ');
    out.push_str(CONTEXTS[rng.random_range(0..CONTEXTS.len())]);
    out
}

/// `k` independent samples from the grammar.
pub fn reference_captions<R: Rng>(scene: &Scene, rng: &mut R, k: usize) -> Vec<String> {
    (0..k).map(|_| render_scene(scene, rng)).collect()
}

/// Deterministic rendering with every attribute mentioned and the default
/// context phrase; e.g. a single red cube becomes "a red cube on the table".
pub fn full_mention_caption(scene: &Scene) -> String {
    let mut out = String::new();
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            out.push_str(" and ");
        }
        render_object(o, true, true, &mut out);
    }
    out.push(' ');
    out.push_str(CONTEXTS[0]);
    out
}

/// Every surface token the grammar can emit.
pub fn grammar_lexicon() -> Vec<String> {
    let mut toks: Vec<String> = Vec::new();
    toks.extend(COUNT_WORDS.iter().map(|s| s.to_string()));
    toks.push(VAGUE_COUNT.to_string());
    toks.push("and".to_string());
    toks.extend(COLORS.iter().map(|s| s.to_string()));
    for c in CATEGORIES {
        toks.push(c.to_string());
        toks.push(format!("{c}s"));
    }
    for ctx in CONTEXTS {
        toks.extend(ctx.split_whitespace().map(|s| s.to_string()));
    }
    toks.sort();
    toks.dedup();
    toks
}
