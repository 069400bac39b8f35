//! Synthetic compositional image-text pairs: `<color> <shape> <position>`
//! prompts rendered to small RGB images with one-pixel jitter.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use mmdc_tensor::NdArray;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const TEXT_LEN: usize = 6;
/// Smallest vocabulary that holds every grammar token.
pub const VOCAB_MIN: usize = 14;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const BACKGROUND: f32 = 0.0;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
    Center,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
        }
    }

    fn word(self) -> &'static str {
        ["red", "green", "blue"][self as usize]
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Cross];

    fn word(self) -> &'static str {
        ["circle", "square", "cross"][self as usize]
    }

    /// Whether the offset `(a, b)` from the shape center is inside the shape.
    /// Sizes were chosen so that every jittered render stays nearest to its
    /// own canonical render.
    fn contains(self, a: f64, b: f64) -> bool {
        match self {
            Shape::Circle => a * a + b * b <= 16.0,
            Shape::Square => a.abs().max(b.abs()) <= 2.0,
            // Diagonal cross ("X").
            Shape::Cross => (a.abs() - b.abs()).abs() <= 1.5 && a.abs().max(b.abs()) <= 3.5,
        }
    }
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::Left,
        Position::Right,
        Position::Top,
        Position::Bottom,
        Position::Center,
    ];

    fn word(self) -> &'static str {
        ["left", "right", "top", "bottom", "center"][self as usize]
    }

    /// Shape center in pixel coordinates (pixel `i` spans `[i, i+1)`).
    fn center(self) -> (f64, f64) {
        match self {
            Position::Left => (4.0, 8.0),
            Position::Right => (12.0, 8.0),
            Position::Top => (8.0, 4.0),
            Position::Bottom => (8.0, 12.0),
            Position::Center => (8.0, 8.0),
        }
    }
}

/// One grammar sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Prompt {
    pub color: Color,
    pub shape: Shape,
    pub position: Position,
}

impl Prompt {
    pub const COUNT: usize = 45;

    /// All prompts, ordered by [`Prompt::index`].
    pub fn all() -> Vec<Prompt> {
        (0..Self::COUNT).map(Self::from_index).collect()
    }

    pub fn index(self) -> usize {
        self.color as usize * 15 + self.shape as usize * 5 + self.position as usize
    }

    pub fn from_index(i: usize) -> Prompt {
        Prompt {
            color: Color::ALL[i / 15],
            shape: Shape::ALL[(i / 5) % 3],
            position: Position::ALL[i % 5],
        }
    }

    /// Parses `"red circle center"`.
    pub fn parse(text: &str) -> Result<Prompt> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let [c, s, p] = words[..] else {
            return Err(Error::invalid(format!(
                "prompt must be `<color> <shape> <position>`, got {text:?}"
            )));
        };
        let find = |w: &str, all: &[&str]| all.iter().position(|x| *x == w);
        let unknown = |w: &str| Error::invalid(format!("unknown prompt word {w:?}"));
        let color = find(c, &["red", "green", "blue"]).ok_or_else(|| unknown(c))?;
        let shape = find(s, &["circle", "square", "cross"]).ok_or_else(|| unknown(s))?;
        let position = find(p, &["left", "right", "top", "bottom", "center"]).ok_or_else(|| unknown(p))?;
        Ok(Prompt {
            color: Color::ALL[color],
            shape: Shape::ALL[shape],
            position: Position::ALL[position],
        })
    }

    /// `[BOS, color, shape, position, EOS, PAD]`. Word ids: colors 3..=5,
    /// shapes 6..=8, positions 9..=13.
    pub fn tokens(self) -> [usize; TEXT_LEN] {
        [
            BOS,
            3 + self.color as usize,
            6 + self.shape as usize,
            9 + self.position as usize,
            EOS,
            PAD,
        ]
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.color.word(),
            self.shape.word(),
            self.position.word()
        )
    }
}

/// Renders at an explicit pixel offset. Pixels take the anti-aliased
/// coverage blend of shape color over the gray background.
pub fn render_offset(prompt: Prompt, dx: i32, dy: i32) -> NdArray {
    let (cx, cy) = prompt.position.center();
    let (cx, cy) = (cx + dx as f64, cy + dy as f64);
    let rgb = prompt.color.rgb();
    let n = SUPERSAMPLE;
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut hits = 0usize;
            for sy in 0..n {
                for sx in 0..n {
                    let px = x as f64 + (sx as f64 + 0.5) / n as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / n as f64;
                    hits += prompt.shape.contains(px - cx, py - cy) as usize;
                }
            }
            let cov = hits as f32 / (n * n) as f32;
            data.extend(rgb.iter().map(|&c| BACKGROUND * (1.0 - cov) + c * cov));
        }
    }
    NdArray::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data).expect("fixed image shape")
}

/// Pixel offset in `{-1, 0, 1}^2` drawn from `jitter_seed`.
pub fn jitter(jitter_seed: u64) -> (i32, i32) {
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    (rng.random_range(-1..=1), rng.random_range(-1..=1))
}

pub fn render(prompt: Prompt, jitter_seed: u64) -> NdArray {
    let (dx, dy) = jitter(jitter_seed);
    render_offset(prompt, dx, dy)
}

pub fn canonical(prompt: Prompt) -> NdArray {
    render_offset(prompt, 0, 0)
}

fn canonical_set() -> &'static [NdArray] {
    static SET: OnceLock<Vec<NdArray>> = OnceLock::new();
    SET.get_or_init(|| Prompt::all().into_iter().map(canonical).collect())
}

/// Nearest canonical render by squared L2 distance (ties go to the lower index).
pub fn classify(image: &[f32]) -> Prompt {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in canonical_set().iter().enumerate() {
        let d: f64 = c
            .data()
            .iter()
            .zip(image)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    Prompt::from_index(best.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    /// Items paired with the importance-probing prompt set.
    Probe,
}

impl Split {
    fn tag(self) -> u64 {
        self as u64
    }
}

/// Jitter seeds of different splits (or different item indices) never collide.
pub fn jitter_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"jitter");
    h.update(seed.to_le_bytes());
    h.update(split.tag().to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    // Low two bits carry the split so seeds are disjoint by construction.
    (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) & !3) | split.tag()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub prompt: Prompt,
    pub jitter_seed: u64,
    pub image: NdArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    /// `n` items with prompts drawn uniformly from the grammar, or cycling
    /// through all 45 prompts in index order when `stratified` is set.
    pub fn generate(n: usize, split: Split, seed: u64, stratified: bool) -> Result<Self> {
        if n < 1 {
            return Err(Error::config("dataset size", ">= 1", n));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (split.tag() << 62));
        let items = (0..n)
            .map(|i| {
                let prompt = if stratified {
                    Prompt::from_index(i % Prompt::COUNT)
                } else {
                    Prompt::from_index(rng.random_range(0..Prompt::COUNT))
                };
                let js = jitter_seed(seed, split, i);
                Item {
                    prompt,
                    jitter_seed: js,
                    image: render(prompt, js),
                }
            })
            .collect();
        Ok(Self { items, split, seed })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stacked images `[B, H, W, C]` and flattened tokens for `indices`.
    pub fn batch(&self, indices: &[usize]) -> (NdArray, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
        let mut tokens = Vec::with_capacity(indices.len() * TEXT_LEN);
        for &i in indices {
            data.extend_from_slice(self.items[i].image.data());
            tokens.extend_from_slice(&self.items[i].prompt.tokens());
        }
        let images = NdArray::new(vec![indices.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data).expect("stacked images");
        (images, tokens)
    }

    /// SHA-256 over prompts, jitter seeds and image bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for it in &self.items {
            h.update((it.prompt.index() as u64).to_le_bytes());
            h.update(it.jitter_seed.to_le_bytes());
            h.update(it.image.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes `NNNNN.ppm` per item plus `index.json`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::with_capacity(self.len());
        for (i, it) in self.items.iter().enumerate() {
            let file = format!("{i:05}.ppm");
            write_ppm(&dir.join(&file), &it.image)?;
            index.push(serde_json::json!({
                "file": file,
                "prompt": it.prompt.to_string(),
                "tokens": it.prompt.tokens(),
                "jitter_seed": it.jitter_seed,
            }));
        }
        let doc = serde_json::json!({
            "split": self.split,
            "seed": self.seed,
            "hash": self.content_hash(),
            "items": index,
        });
        let path = dir.join("index.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))
    }
}

/// Balanced multiset of `k` prompts. Prompt `j` of the sequence has color
/// `j mod 3`, position `j mod 5` and a shape that cycles through all three
/// within every run of three, so every prefix is balanced per attribute to
/// within one, and each block of 45 covers the grammar exactly once. Labels
/// are permuted per seed.
pub fn importance_prompt_set(k: usize, seed: u64) -> Result<Vec<Prompt>> {
    if k < 1 {
        return Err(Error::config("importance.prompts", ">= 1", k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors = Color::ALL;
    let mut shapes = Shape::ALL;
    let mut positions = Position::ALL;
    colors.shuffle(&mut rng);
    shapes.shuffle(&mut rng);
    positions.shuffle(&mut rng);
    Ok((0..k)
        .map(|j| {
            let a = j % 9;
            Prompt {
                color: colors[a % 3],
                shape: shapes[(a % 3 + a / 3) % 3],
                position: positions[j % 5],
            }
        })
        .collect())
}

/// The importance prompt set paired with rendered images.
pub fn probe_items(k: usize, seed: u64) -> Result<Vec<Item>> {
    Ok(importance_prompt_set(k, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let js = jitter_seed(seed, Split::Probe, i);
            Item {
                prompt,
                jitter_seed: js,
                image: render(prompt, js),
            }
        })
        .collect())
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Binary PPM of an `[H, W, 3]` image in `[-1, 1]`.
pub fn write_ppm(path: &Path, image: &NdArray) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid(format!("PPM needs [H, W, 3], got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Tiles `[N, H, W, 3]` images into a grid `cols` wide.
pub fn write_ppm_mosaic(path: &Path, images: &NdArray, cols: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[3] != 3 || cols == 0 {
        return Err(Error::invalid(format!("mosaic needs [N, H, W, 3], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut pix = vec![0.0f32; gh * gw * 3];
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            let src = (i * h + y) * w * 3;
            let dst = ((r * h + y) * gw + c * w) * 3;
            pix[dst..dst + w * 3].copy_from_slice(&images.data()[src..src + w * 3]);
        }
    }
    write_ppm(path, &NdArray::new(vec![gh, gw, 3], pix)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_unique_and_in_vocab() {
        let mut seen = std::collections::BTreeSet::new();
        for p in Prompt::all() {
            let t = p.tokens();
            assert!(t.iter().all(|&id| id < VOCAB_MIN));
            seen.insert(t);
        }
        assert_eq!(seen.len(), 45);
    }

    #[test]
    fn parse_round_trips_and_rejects_unknown_words() {
        for p in Prompt::all() {
            assert_eq!(Prompt::parse(&p.to_string()).unwrap(), p);
            assert_eq!(Prompt::from_index(p.index()), p);
        }
        assert!(Prompt::parse("purple circle center").is_err());
        assert!(Prompt::parse("red circle").is_err());
    }

    #[test]
    fn red_circle_center_pixel() {
        let img = canonical(Prompt::parse("red circle center").unwrap());
        let px = &img.data()[(8 * IMAGE_SIZE + 8) * 3..][..3];
        assert!(px[0] > 0.5 && px[1] < 0.0 && px[2] < 0.0, "{px:?}");
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        for p in Prompt::all() {
            let a = render(p, 1234);
            assert!(a.bit_eq(&render(p, 1234)));
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let changed = a
                .data()
                .chunks(3)
                .filter(|px| px.iter().any(|&v| v != BACKGROUND))
                .count();
            assert!(changed >= 4);
        }
    }

    #[test]
    fn every_jittered_render_classifies_to_its_prompt() {
        for p in Prompt::all() {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    assert_eq!(classify(render_offset(p, dx, dy).data()), p, "{p} ({dx},{dy})");
                }
            }
        }
    }

    #[test]
    fn stratified_covers_every_prompt_once() {
        let d = Dataset::generate(45, Split::Train, 3, true).unwrap();
        let mut idx: Vec<usize> = d.items.iter().map(|i| i.prompt.index()).collect();
        idx.sort();
        assert_eq!(idx, (0..45).collect::<Vec<_>>());
        assert!(Dataset::generate(0, Split::Train, 3, true).is_err());
    }

    #[test]
    fn train_and_val_jitter_seeds_are_disjoint() {
        let tr = Dataset::generate(300, Split::Train, 0, false).unwrap();
        let va = Dataset::generate(300, Split::Val, 0, false).unwrap();
        let a: std::collections::BTreeSet<u64> = tr.items.iter().map(|i| i.jitter_seed).collect();
        assert!(va.items.iter().all(|i| !a.contains(&i.jitter_seed)));
    }

    #[test]
    fn importance_set_balance() {
        let once = importance_prompt_set(45, 9).unwrap();
        let mut idx: Vec<usize> = once.iter().map(|p| p.index()).collect();
        idx.sort();
        assert_eq!(idx, (0..45).collect::<Vec<_>>());
        let twice = importance_prompt_set(90, 9).unwrap();
        let mut counts = [0usize; 45];
        twice.iter().for_each(|p| counts[p.index()] += 1);
        assert!(counts.iter().all(|&c| c == 2));
        assert!(importance_prompt_set(0, 9).is_err());
    }
}
