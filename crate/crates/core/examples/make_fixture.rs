//! Regenerates the bundled 200-image fixture under `tests/fixtures/`.
//!
//! ```text
//! cargo run -p q16 --example make_fixture [OUT_DIR]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use q16::embedstore::EmbeddingStore;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const N: usize = 200;
const DIM: usize = 16;
const SEED: u64 = 2022;

struct Theme {
    labels: &'static [&'static str],
    nouns: &'static [&'static str],
    settings: &'static [&'static str],
    inappropriate: bool,
}

const THEMES: &[Theme] = &[
    Theme {
        labels: &["revolver", "assault rifle", "gasmask"],
        nouns: &["gun", "rifle", "soldier", "man holding a gun", "gas mask"],
        settings: &["in a dark alley", "on a battlefield", "near a burning car"],
        inappropriate: true,
    },
    Theme {
        labels: &["guillotine", "cleaver"],
        nouns: &["blood", "knife", "wound", "bloody knife"],
        settings: &["on the floor", "in a kitchen", "next to a body"],
        inappropriate: true,
    },
    Theme {
        labels: &["golden retriever", "tabby cat"],
        nouns: &["dog", "cat", "puppy", "kitten", "man holding a puppy"],
        settings: &["on a sofa", "in the garden", "playing with a ball"],
        inappropriate: false,
    },
    Theme {
        labels: &["pizza", "cheeseburger", "espresso"],
        nouns: &["pizza", "plate of food", "cup of coffee", "burger"],
        settings: &["on a table", "in a restaurant", "in a kitchen", "on a wooden board"],
        inappropriate: false,
    },
    Theme {
        labels: &["seashore", "alp", "mountain bike"],
        nouns: &["beach", "mountain", "bike", "lake"],
        settings: &["at sunset", "under a blue sky", "in the fog", "near a parked car"],
        inappropriate: false,
    },
];

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn json_line(out: &mut String, value: serde_json::Value) {
    out.push_str(&value.to_string());
    out.push('\n');
}

fn main() {
    let out_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures"));
    fs::create_dir_all(&out_dir).expect("create fixture dir");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    // A shared "inappropriate" axis plus one centre per theme.
    let mut axis: Vec<f64> = (0..DIM).map(|_| gaussian(&mut rng)).collect();
    unit(&mut axis);
    let centres: Vec<Vec<f64>> = THEMES
        .iter()
        .map(|t| {
            let sign = if t.inappropriate { 1.0 } else { -1.0 };
            let mut c: Vec<f64> = (0..DIM)
                .map(|d| 0.6 * gaussian(&mut rng) + sign * 1.2 * axis[d])
                .collect();
            unit(&mut c);
            c
        })
        .collect();

    let mut ids = Vec::with_capacity(N);
    let mut data = Vec::with_capacity(N * DIM);
    let (mut ratings, mut annotations, mut captions) = (String::new(), String::new(), String::new());
    for i in 0..N {
        let id = format!("img{i:03}");
        // roughly 1 in 6 images is drawn from an inappropriate theme
        let t = if i % 6 == 0 { i / 6 % 2 } else { 2 + i % 3 };
        let theme = &THEMES[t];
        let spread = 0.25 + 0.25 * rng.random::<f64>();
        let mut v: Vec<f64> = centres[t]
            .iter()
            .map(|c| c + spread * gaussian(&mut rng) / (DIM as f64).sqrt())
            .collect();
        unit(&mut v);
        // every 25th image is pushed half way towards the other side: borderline scores
        if i % 25 == 7 {
            let sign = if theme.inappropriate { -1.0 } else { 1.0 };
            v.iter_mut().zip(&axis).for_each(|(x, a)| *x += sign * 0.55 * a);
            unit(&mut v);
        }
        data.extend(v.iter().map(|&x| x as f32));

        if i < 120 {
            let rating = if theme.inappropriate {
                1.0 + 1.4 * rng.random::<f64>()
            } else if i % 10 == 3 {
                2.6 + 0.8 * rng.random::<f64>()
            } else {
                3.6 + 1.4 * rng.random::<f64>()
            };
            let rating = (rating * 100.0).round() / 100.0;
            json_line(&mut ratings, serde_json::json!({ "id": id, "rating": rating }));
        }

        let mut labels = vec![*theme.labels.choose(&mut rng).unwrap()];
        if rng.random::<f64>() < 0.3 {
            labels.push(*theme.labels.choose(&mut rng).unwrap());
            labels.dedup();
        }
        if i % 17 != 5 {
            json_line(&mut annotations, serde_json::json!({ "id": id, "labels": labels }));
        }

        if i % 10 != 6 {
            let n_caps = 1 + i % 2;
            let caps: Vec<String> = (0..n_caps)
                .map(|_| {
                    let mut s = String::new();
                    let _ = write!(
                        s,
                        "a picture of a {} {}",
                        theme.nouns.choose(&mut rng).unwrap(),
                        theme.settings.choose(&mut rng).unwrap()
                    );
                    s
                })
                .collect();
            json_line(&mut captions, serde_json::json!({ "id": id, "captions": caps }));
        }
        ids.push(id);
    }

    let store = EmbeddingStore::new(ids, data, DIM, true).expect("valid fixture store");
    store.save(out_dir.join("fixture.meta.json")).expect("write container");
    fs::write(out_dir.join("ratings.jsonl"), ratings).unwrap();
    fs::write(out_dir.join("annotations.jsonl"), annotations).unwrap();
    fs::write(out_dir.join("captions.jsonl"), captions).unwrap();
    fs::write(
        out_dir.join("stopwords.txt"),
        "a\nof\nthe\non\nin\nat\nwith\nnext\nto\nunder\n",
    )
    .unwrap();
    println!("{}", out_dir.display());
}
