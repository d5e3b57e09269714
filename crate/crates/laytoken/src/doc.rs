//! Document data model: pages of text segments with pixel bounding boxes,
//! OCR-JSON ingestion, coordinate normalization, and a synthetic
//! layout-dependent corpus generator.
//!
//! Pixel coordinates exist only at the ingestion boundary; everything
//! model-facing works on [`BBox`] coordinates normalized to `[0,1]`.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::OnceLock;

/// Axis-aligned box in normalized page coordinates, `0 <= x1 <= x2 <= 1`
/// and `0 <= y1 <= y2 <= 1`. Degenerate (zero-area) boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| (0.0..=1.0).contains(&lo) && lo <= hi && hi <= 1.0;
        if !ok(self.x1, self.x2) || !ok(self.y1, self.y2) {
            return Err(Error::Validation(format!(
                "normalized box out of range: [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    /// Normalize pixel coordinates against a page size.
    pub fn from_pixels(coords: [f64; 4], page_width: u32, page_height: u32) -> Result<Self> {
        if page_width == 0 || page_height == 0 {
            return Err(Error::Argument(format!(
                "page dimensions must be positive, got {page_width}x{page_height}"
            )));
        }
        let w = f64::from(page_width);
        let h = f64::from(page_height);
        BBox::new(coords[0] / w, coords[1] / h, coords[2] / w, coords[3] / h)
    }

    /// Inverse of [`BBox::from_pixels`].
    pub fn to_pixels(&self, page_width: u32, page_height: u32) -> [f64; 4] {
        let w = f64::from(page_width);
        let h = f64::from(page_height);
        [self.x1 * w, self.y1 * h, self.x2 * w, self.y2 * h]
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Integer pixel box as it appears in OCR JSON, `[x1, y1, x2, y2]`.
pub type PixelBox = [u32; 4];

/// One OCR unit: a text string and its pixel bounding box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSegment {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

impl TextSegment {
    /// Normalized box of this segment against its page size.
    pub fn normalized(&self, page_width: u32, page_height: u32) -> Result<BBox> {
        BBox::from_pixels(self.bbox.map(f64::from), page_width, page_height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub width: u32,
    pub height: u32,
    pub segments: Vec<TextSegment>,
}

/// An ordered list of pages; segment order within a page is the reading
/// order as ingested and is never re-sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub pages: Vec<Page>,
}

impl Document {
    /// All segments in page-major order, with their page sizes.
    pub fn segments(&self) -> impl Iterator<Item = (&TextSegment, u32, u32)> {
        self.pages
            .iter()
            .flat_map(|p| p.segments.iter().map(move |s| (s, p.width, p.height)))
    }

    pub fn segment_count(&self) -> usize {
        self.pages.iter().map(|p| p.segments.len()).sum()
    }

    /// Compact canonical JSON in the OCR schema.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("document serialization cannot fail")
    }
}

/// Parse and validate one OCR-JSON document.
///
/// Validation errors name the offending page and segment index; JSON syntax
/// errors carry the byte offset of the failure.
pub fn ingest_document(raw: &[u8]) -> Result<Document> {
    let doc: Document =
        serde_json::from_slice(raw).map_err(|e| Error::from_json(&e, raw))?;
    validate_document(&doc)?;
    Ok(doc)
}

fn validate_document(doc: &Document) -> Result<()> {
    for (pi, page) in doc.pages.iter().enumerate() {
        if page.width == 0 || page.height == 0 {
            return Err(Error::Validation(format!(
                "page {pi}: dimensions must be positive, got {}x{}",
                page.width, page.height
            )));
        }
        for (si, seg) in page.segments.iter().enumerate() {
            if seg.text.chars().all(char::is_whitespace) {
                return Err(Error::Validation(format!(
                    "page {pi} segment {si}: text is empty or whitespace-only"
                )));
            }
            let [x1, y1, x2, y2] = seg.bbox;
            if x1 > x2 || y1 > y2 {
                return Err(Error::Validation(format!(
                    "page {pi} segment {si}: box corners out of order [{x1}, {y1}, {x2}, {y2}]"
                )));
            }
            if x2 > page.width || y2 > page.height {
                return Err(Error::Validation(format!(
                    "page {pi} segment {si}: box [{x1}, {y1}, {x2}, {y2}] exceeds page {}x{}",
                    page.width, page.height
                )));
            }
        }
    }
    Ok(())
}

/// One question over a document in a corpus, with its gold answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    /// Index of the document in the corpus this question is about.
    pub doc: usize,
    pub question: String,
    pub answers: Vec<String>,
}

/// Sidecar file schema: `{"qa": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaSidecar {
    pub qa: Vec<QaPair>,
}

/// A corpus is a list of documents plus QA pairs referencing them by index.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub qa: Vec<QaPair>,
}

impl Corpus {
    /// Questions grouped with their documents.
    pub fn qa_with_docs(&self) -> impl Iterator<Item = (&Document, &QaPair)> {
        self.qa.iter().map(|q| (&self.documents[q.doc], q))
    }

    pub fn save(&self, corpus_path: &Path, qa_path: &Path) -> Result<()> {
        let docs_json = serde_json::to_string_pretty(&self.documents)
            .expect("corpus serialization cannot fail");
        std::fs::write(corpus_path, docs_json)
            .map_err(|e| Error::io(corpus_path.display().to_string(), e))?;
        let qa_json = serde_json::to_string_pretty(&QaSidecar { qa: self.qa.clone() })
            .expect("qa serialization cannot fail");
        std::fs::write(qa_path, qa_json)
            .map_err(|e| Error::io(qa_path.display().to_string(), e))?;
        Ok(())
    }

    /// Load documents (a JSON array in the OCR schema) and, if present, the
    /// QA sidecar.
    pub fn load(corpus_path: &Path, qa_path: Option<&Path>) -> Result<Corpus> {
        let raw = std::fs::read(corpus_path)
            .map_err(|e| Error::io(corpus_path.display().to_string(), e))?;
        let documents: Vec<Document> =
            serde_json::from_slice(&raw).map_err(|e| Error::from_json(&e, &raw))?;
        for doc in &documents {
            validate_document(doc)?;
        }
        let qa = match qa_path {
            Some(p) => {
                let raw = std::fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
                let sidecar: QaSidecar =
                    serde_json::from_slice(&raw).map_err(|e| Error::from_json(&e, &raw))?;
                for q in &sidecar.qa {
                    if q.doc >= documents.len() {
                        return Err(Error::Validation(format!(
                            "qa pair references document {} but corpus has {}",
                            q.doc,
                            documents.len()
                        )));
                    }
                }
                sidecar.qa
            }
            None => Vec::new(),
        };
        Ok(Corpus { documents, qa })
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

/// Parameters for the synthetic key-value corpus.
///
/// Each document is a set of key/value segment pairs whose association is
/// carried *only* by spatial adjacency (the value box touches its key box on
/// the right or below). Segment order in the stream is shuffled, so text
/// order alone cannot recover the association. At `distractor_rate > 0`,
/// documents additionally contain decoy keys that copy a real key's text but
/// sit spatially isolated next to nothing, paired in generation with a wrong
/// value that is itself isolated. A reader without layout therefore faces
/// several equally plausible value strings per question.
///
/// Keys are single letters and values come from a fixed 26-word vocabulary
/// ([`value_pool`]) whose words never collide under the ANLS threshold, so
/// the learning problem is selecting the spatially bound value, not
/// open-vocabulary string copying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_documents: usize,
    /// Inclusive range of total segments per document.
    pub segments_per_doc: (usize, usize),
    /// Inclusive range of key/value pairs (and thus QA pairs) per document.
    pub keys_per_doc: (usize, usize),
    pub seed: u64,
    /// Probability that a key/value pair gets a same-text decoy key.
    pub distractor_rate: f64,
    /// Probability that a pair stays adjacent in reading order, the way OCR
    /// order correlates with layout in real documents. The rest of the
    /// pairs scatter, so text order alone never determines the answer.
    #[serde(default = "default_stream_locality")]
    pub stream_locality: f64,
}

fn default_stream_locality() -> f64 {
    0.3
}

/// Page geometry used by the generator. Cells are spaced so that boxes in
/// horizontally or vertically neighboring cells touch (gap of a few pixels)
/// while boxes one cell further apart are separated by at least a full cell.
const PAGE_W: u32 = 2048;
const PAGE_H: u32 = 2048;
const CELL_W: u32 = 128;
const CELL_H: u32 = 64;
const GRID_COLS: usize = (PAGE_W / CELL_W) as usize; // 16
const GRID_ROWS: usize = (PAGE_H / CELL_H) as usize; // 32
/// Units placed on one page before spilling to the next.
const UNITS_PER_PAGE: usize = 12;

impl SyntheticSpec {
    pub fn new(
        n_documents: usize,
        segments_per_doc: (usize, usize),
        keys_per_doc: (usize, usize),
        seed: u64,
        distractor_rate: f64,
    ) -> Result<Self> {
        let spec = SyntheticSpec {
            n_documents,
            segments_per_doc,
            keys_per_doc,
            seed,
            distractor_rate,
            stream_locality: default_stream_locality(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_stream_locality(mut self, locality: f64) -> Result<Self> {
        self.stream_locality = locality;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_documents == 0 {
            return Err(Error::Argument("n_documents must be >= 1".into()));
        }
        let (slo, shi) = self.segments_per_doc;
        let (klo, khi) = self.keys_per_doc;
        if slo > shi || slo == 0 {
            return Err(Error::Argument(format!(
                "segments_per_doc range is empty: {slo}..={shi}"
            )));
        }
        if klo > khi || klo == 0 {
            return Err(Error::Argument(format!(
                "keys_per_doc range is empty: {klo}..={khi}"
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Argument(format!(
                "distractor_rate must be in [0,1], got {}",
                self.distractor_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.stream_locality) {
            return Err(Error::Argument(format!(
                "stream_locality must be in [0,1], got {}",
                self.stream_locality
            )));
        }
        if khi > 24 {
            return Err(Error::Argument(format!(
                "keys_per_doc upper bound {khi} exceeds the single-letter key space (24)"
            )));
        }
        let decoy_floor = if self.distractor_rate > 0.0 { 2 } else { 0 };
        if slo < 2 * klo + decoy_floor {
            return Err(Error::Argument(format!(
                "segments_per_doc lower bound {slo} cannot hold {klo} pairs{}",
                if decoy_floor > 0 { " plus one decoy" } else { "" }
            )));
        }
        if shi > 100 {
            return Err(Error::Argument(format!(
                "segments_per_doc upper bound {shi} exceeds the page grid capacity (100)"
            )));
        }
        Ok(())
    }
}

/// The closed value vocabulary: one 4-letter word per initial letter, any
/// two words at edit distance >= 3. Built once from a fixed seed, so every
/// corpus shares it regardless of its own seed.
pub fn value_pool() -> &'static [String] {
    static POOL: OnceLock<Vec<String>> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut rng = ChaCha12Rng::seed_from_u64(0x4C41_594F_5554);
        let mut pool: Vec<String> = Vec::with_capacity(26);
        for first in 0..26u8 {
            'search: loop {
                let mut word = String::new();
                word.push((b'a' + first) as char);
                for _ in 0..3 {
                    word.push((b'a' + rng.random_range(0..26u8)) as char);
                }
                for other in &pool {
                    if edit_distance(&word, other) < 3 {
                        continue 'search;
                    }
                }
                pool.push(word);
                break;
            }
        }
        pool
    })
}

/// Small local edit distance used only for pool construction.
fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<u8> = a.bytes().collect();
    let b: Vec<u8> = b.bytes().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// What one placed unit contributes to a document.
enum Unit {
    /// Key segment with its value segment touching on the right or below.
    Pair { key: String, value: String },
    /// Decoy: a copy of a real key's text plus an unrelated value string,
    /// both spatially isolated.
    Decoy { key: String, value: String },
    /// A single isolated noise segment.
    Filler { text: String },
}

/// Grid-cell occupancy for one document, shared across its pages so that
/// per-page normalized coordinates never collide into false adjacency.
struct CellGrid {
    /// 0 = free, 1 = blocked (adjacent to something), 2 = occupied.
    cells: Vec<u8>,
}

impl CellGrid {
    fn new() -> Self {
        CellGrid {
            cells: vec![0; GRID_COLS * GRID_ROWS],
        }
    }

    fn idx(r: usize, c: usize) -> usize {
        r * GRID_COLS + c
    }

    fn free(&self, r: usize, c: usize) -> bool {
        self.cells[Self::idx(r, c)] == 0
    }

    /// Claim `cells` as occupied and block their 4-neighborhoods, so nothing
    /// placed later can touch this unit.
    fn claim(&mut self, cells: &[(usize, usize)]) {
        for &(r, c) in cells {
            self.cells[Self::idx(r, c)] = 2;
        }
        for &(r, c) in cells {
            let mut block = |r: isize, c: isize| {
                if r >= 0 && c >= 0 && (r as usize) < GRID_ROWS && (c as usize) < GRID_COLS {
                    let i = Self::idx(r as usize, c as usize);
                    if self.cells[i] == 0 {
                        self.cells[i] = 1;
                    }
                }
            };
            let (r, c) = (r as isize, c as isize);
            block(r - 1, c);
            block(r + 1, c);
            block(r, c - 1);
            block(r, c + 1);
        }
    }

    /// Find a random spot where `shape` offsets (relative cells) are all free.
    fn find_spot(
        &self,
        rng: &mut ChaCha12Rng,
        shape: &[(usize, usize)],
    ) -> Option<(usize, usize)> {
        let max_r = shape.iter().map(|s| s.0).max().unwrap();
        let max_c = shape.iter().map(|s| s.1).max().unwrap();
        for _ in 0..256 {
            let r = rng.random_range(0..GRID_ROWS - max_r);
            let c = rng.random_range(0..GRID_COLS - max_c);
            if shape.iter().all(|&(dr, dc)| self.free(r + dr, c + dc)) {
                return Some((r, c));
            }
        }
        None
    }
}

/// Pixel box spanning a full grid cell, so the two segments of a pair share
/// an edge coordinate exactly (as adjacent table cells do) while unrelated
/// segments stay at least a full cell apart.
fn cell_box(r: usize, c: usize) -> PixelBox {
    let x0 = c as u32 * CELL_W;
    let y0 = r as u32 * CELL_H;
    [x0, y0, x0 + CELL_W, y0 + CELL_H]
}

fn random_word(rng: &mut ChaCha12Rng, len: usize, taken: &mut Vec<String>) -> String {
    loop {
        let word: String = (0..len)
            .map(|_| (b'a' + rng.random_range(0..26u8)) as char)
            .collect();
        if !taken.contains(&word) {
            taken.push(word.clone());
            return word;
        }
    }
}

/// Generate a deterministic corpus of layout-dependent key-value documents.
///
/// Identical specs produce byte-identical corpora. Every QA pair has exactly
/// one segment whose text equals the gold answer.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut documents = Vec::with_capacity(spec.n_documents);
    let mut qa = Vec::new();

    for doc_idx in 0..spec.n_documents {
        let (doc, doc_qa) = generate_document(spec, &mut rng)?;
        documents.push(doc);
        qa.extend(doc_qa.into_iter().map(|(question, answer)| QaPair {
            doc: doc_idx,
            question,
            answers: vec![answer],
        }));
    }

    Ok(Corpus { documents, qa })
}

fn generate_document(
    spec: &SyntheticSpec,
    rng: &mut ChaCha12Rng,
) -> Result<(Document, Vec<(String, String)>)> {
    let (slo, shi) = spec.segments_per_doc;
    let (klo, khi) = spec.keys_per_doc;
    let n_segments = rng.random_range(slo..=shi);

    // Decide how many pairs and decoys fit the exact segment budget.
    let mut n_keys = rng.random_range(klo..=khi);
    let decoy_floor = usize::from(spec.distractor_rate > 0.0);
    while 2 * n_keys + 2 * decoy_floor > n_segments && n_keys > klo {
        n_keys -= 1;
    }
    let budget_decoys = (n_segments - 2 * n_keys) / 2;
    let mut decoy_for: Vec<bool> = (0..n_keys)
        .map(|_| rng.random_bool(spec.distractor_rate))
        .collect();
    // Clamp to the budget, dropping from the end; at rate 1.0 the floor
    // guarantees at least one decoy survives.
    let mut n_decoys = decoy_for.iter().filter(|&&d| d).count();
    for d in decoy_for.iter_mut().rev() {
        if n_decoys <= budget_decoys {
            break;
        }
        if *d {
            *d = false;
            n_decoys -= 1;
        }
    }
    let n_fillers = n_segments - 2 * n_keys - 2 * n_decoys;

    // Keys are distinct single uppercase letters (so they never collide with
    // letters inside the lowercase values); gold values are distinct pool
    // words. Decoy values draw from the leftover pool words so they can
    // never equal a gold; fillers are longer random strings outside the pool.
    let mut letters: Vec<char> = ('A'..='Z').collect();
    letters.shuffle(rng);
    let keys: Vec<String> = letters[..n_keys].iter().map(|c| c.to_string()).collect();
    let mut pool: Vec<String> = value_pool().to_vec();
    pool.shuffle(rng);
    let values: Vec<String> = pool[..n_keys].to_vec();
    let leftover = &pool[n_keys..];
    let decoy_values: Vec<String> = (0..n_decoys)
        .map(|i| leftover[i % leftover.len()].clone())
        .collect();
    let mut taken = Vec::new();
    let fillers: Vec<String> =
        (0..n_fillers).map(|_| random_word(rng, 6, &mut taken)).collect();

    let mut units = Vec::new();
    for i in 0..n_keys {
        units.push(Unit::Pair {
            key: keys[i].clone(),
            value: values[i].clone(),
        });
    }
    let mut dv = decoy_values.into_iter();
    for (i, &has_decoy) in decoy_for.iter().enumerate() {
        if has_decoy {
            units.push(Unit::Decoy {
                key: keys[i].clone(),
                value: dv.next().expect("decoy budget matches"),
            });
        }
    }
    for text in fillers {
        units.push(Unit::Filler { text });
    }

    // Place units page by page; cell occupancy is shared across pages so
    // per-page normalized boxes can never alias into false adjacency.
    // Each reading-order block holds either one segment or, for a
    // locality-kept pair, the key followed by its value.
    let mut grid = CellGrid::new();
    let mut pages: Vec<Vec<Vec<TextSegment>>> = vec![Vec::new()];
    let mut units_on_page = 0usize;
    for unit in &units {
        if units_on_page >= UNITS_PER_PAGE {
            pages.push(Vec::new());
            units_on_page = 0;
        }
        let page = pages.last_mut().unwrap();
        match unit {
            Unit::Pair { key, value } => {
                // Value touches its key on the right or below.
                let horizontal = rng.random_bool(0.5);
                let shape: &[(usize, usize)] =
                    if horizontal { &[(0, 0), (0, 1)] } else { &[(0, 0), (1, 0)] };
                let (r, c) = grid.find_spot(rng, shape).ok_or_else(|| {
                    Error::Validation("page grid exhausted; reduce segments_per_doc".into())
                })?;
                let cells = [(r, c), (r + shape[1].0, c + shape[1].1)];
                grid.claim(&cells);
                let key_seg = TextSegment { text: key.clone(), bbox: cell_box(r, c) };
                let value_seg = TextSegment {
                    text: value.clone(),
                    bbox: cell_box(cells[1].0, cells[1].1),
                };
                if rng.random_bool(spec.stream_locality) {
                    page.push(vec![key_seg, value_seg]);
                } else {
                    page.push(vec![key_seg]);
                    page.push(vec![value_seg]);
                }
            }
            Unit::Decoy { key, value } => {
                // Both segments isolated: adjacent to nothing.
                for text in [key, value] {
                    let (r, c) = grid.find_spot(rng, &[(0, 0)]).ok_or_else(|| {
                        Error::Validation("page grid exhausted; reduce segments_per_doc".into())
                    })?;
                    grid.claim(&[(r, c)]);
                    page.push(vec![TextSegment { text: text.clone(), bbox: cell_box(r, c) }]);
                }
            }
            Unit::Filler { text } => {
                let (r, c) = grid.find_spot(rng, &[(0, 0)]).ok_or_else(|| {
                    Error::Validation("page grid exhausted; reduce segments_per_doc".into())
                })?;
                grid.claim(&[(r, c)]);
                page.push(vec![TextSegment { text: text.clone(), bbox: cell_box(r, c) }]);
            }
        }
        units_on_page += 1;
    }

    // Shuffle reading-order blocks within each page; scattered segments land
    // anywhere, locality-kept pairs move as a unit.
    let pages: Vec<Vec<TextSegment>> = pages
        .into_iter()
        .map(|mut blocks| {
            blocks.shuffle(rng);
            blocks.into_iter().flatten().collect()
        })
        .collect();

    let doc = Document {
        pages: pages
            .into_iter()
            .map(|segments| Page { width: PAGE_W, height: PAGE_H, segments })
            .collect(),
    };

    let doc_qa = keys
        .iter()
        .zip(values.iter())
        .map(|(k, v)| (format!("value of {k}?"), v.clone()))
        .collect();

    Ok((doc, doc_qa))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_page_doc() -> &'static str {
        r#"{"pages":[{"width":1000,"height":1000,"segments":[{"text":"Total","box":[100,200,300,240]}]}]}"#
    }

    #[test]
    fn ingest_retains_raw_pixel_box() {
        let doc = ingest_document(one_page_doc().as_bytes()).unwrap();
        assert_eq!(doc.segment_count(), 1);
        assert_eq!(doc.pages[0].segments[0].bbox, [100, 200, 300, 240]);
        assert_eq!(doc.pages[0].segments[0].text, "Total");
    }

    #[test]
    fn ingest_rejects_swapped_corners() {
        let raw = r#"{"pages":[{"width":1000,"height":1000,"segments":[{"text":"x","box":[300,200,100,240]}]}]}"#;
        let err = ingest_document(raw.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn ingest_rejects_box_outside_page() {
        let raw = r#"{"pages":[{"width":200,"height":200,"segments":[{"text":"x","box":[0,0,300,100]}]}]}"#;
        let err = ingest_document(raw.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("page 0 segment 0"), "{msg}");
    }

    #[test]
    fn ingest_rejects_blank_text() {
        let raw = r#"{"pages":[{"width":200,"height":200,"segments":[{"text":"  ","box":[0,0,10,10]}]}]}"#;
        assert!(matches!(
            ingest_document(raw.as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn ingest_preserves_page_major_order() {
        let raw = r#"{"pages":[
            {"width":100,"height":100,"segments":[
                {"text":"a","box":[0,0,1,1]},{"text":"b","box":[2,0,3,1]},{"text":"c","box":[4,0,5,1]}]},
            {"width":100,"height":100,"segments":[
                {"text":"d","box":[0,0,1,1]},{"text":"e","box":[2,0,3,1]}]}
        ]}"#;
        let doc = ingest_document(raw.as_bytes()).unwrap();
        let texts: Vec<&str> = doc.segments().map(|(s, _, _)| s.text.as_str()).collect();
        assert_eq!(texts, ["a", "b", "c", "d", "e"]);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let raw = b"{\"pages\": [}";
        match ingest_document(raw) {
            Err(Error::JsonParse { offset, .. }) => assert!(offset <= raw.len()),
            other => panic!("expected JsonParse, got {other:?}"),
        }
    }

    #[test]
    fn ingestion_is_lossless_for_text() {
        let doc = ingest_document(one_page_doc().as_bytes()).unwrap();
        let reparsed = ingest_document(doc.to_json().as_bytes()).unwrap();
        let texts = |d: &Document| {
            d.segments().map(|(s, _, _)| s.text.clone()).collect::<Vec<_>>().join("")
        };
        assert_eq!(texts(&doc), texts(&reparsed));
    }

    #[test]
    fn normalize_matches_table_values() {
        let b = BBox::from_pixels([123.0, 456.0, 133.0, 500.0], 1000, 1000).unwrap();
        assert_eq!(b.coords(), [0.123, 0.456, 0.133, 0.500]);
    }

    #[test]
    fn normalize_full_page_box() {
        let b = BBox::from_pixels([0.0, 0.0, 640.0, 480.0], 640, 480).unwrap();
        assert_eq!(b.coords(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn normalize_accepts_degenerate_box() {
        let b = BBox::from_pixels([500.0, 250.0, 500.0, 250.0], 1000, 1000).unwrap();
        assert_eq!(b.coords(), [0.5, 0.25, 0.5, 0.25]);
    }

    #[test]
    fn normalize_rejects_zero_page() {
        assert!(matches!(
            BBox::from_pixels([0.0, 0.0, 1.0, 1.0], 0, 100),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn normalize_roundtrip_is_tight() {
        for &(w, h) in &[(1u32, 1u32), (13, 7), (1920, 1080), (2048, 2048)] {
            let b = BBox::new(0.123, 0.456, 0.789, 0.999).unwrap();
            let back = BBox::from_pixels(b.to_pixels(w, h), w, h).unwrap();
            for (a, e) in back.coords().iter().zip(b.coords()) {
                assert!((a - e).abs() < 1e-9, "{a} vs {e} at {w}x{h}");
            }
        }
    }

    fn small_spec(seed: u64, rate: f64) -> SyntheticSpec {
        SyntheticSpec::new(4, (8, 8), (2, 2), seed, rate).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_corpus(&small_spec(7, 1.0)).unwrap();
        let b = generate_synthetic_corpus(&small_spec(7, 1.0)).unwrap();
        assert_eq!(a.documents, b.documents);
        assert_eq!(a.qa, b.qa);
        let c = generate_synthetic_corpus(&small_spec(8, 1.0)).unwrap();
        assert_ne!(a.documents, c.documents);
    }

    #[test]
    fn generation_respects_exact_segment_count() {
        let spec = SyntheticSpec::new(6, (6, 6), (2, 2), 3, 0.0).unwrap();
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        for doc in &corpus.documents {
            assert_eq!(doc.segment_count(), 6);
        }
    }

    #[test]
    fn gold_answer_text_is_unique_per_document() {
        let corpus = generate_synthetic_corpus(&small_spec(11, 1.0)).unwrap();
        for q in &corpus.qa {
            let doc = &corpus.documents[q.doc];
            let gold = &q.answers[0];
            let hits = doc.segments().filter(|(s, _, _)| &s.text == gold).count();
            assert_eq!(hits, 1, "gold {gold:?} must appear exactly once");
        }
    }

    #[test]
    fn rate_one_duplicates_some_key_text() {
        let corpus = generate_synthetic_corpus(&small_spec(5, 1.0)).unwrap();
        for doc in &corpus.documents {
            let dup = doc.segments().any(|(s, _, _)| {
                doc.segments()
                    .filter(|(t, _, _)| t.text == s.text)
                    .count()
                    > 1
            });
            assert!(dup, "every rate-1 document carries a same-text decoy key");
        }
    }

    #[test]
    fn generated_corpus_reingests_cleanly() {
        let corpus = generate_synthetic_corpus(&small_spec(13, 0.5)).unwrap();
        for doc in &corpus.documents {
            ingest_document(doc.to_json().as_bytes()).unwrap();
        }
    }

    /// Spatial adjacency (as the model must learn it) picks out exactly the
    /// generated gold value.
    #[test]
    fn adjacency_identifies_gold_uniquely() {
        let corpus = generate_synthetic_corpus(&small_spec(17, 1.0)).unwrap();
        for q in &corpus.qa {
            let doc = &corpus.documents[q.doc];
            let key_text = q
                .question
                .strip_prefix("value of ")
                .and_then(|s| s.strip_suffix('?'))
                .unwrap();
            let mut adjacent_values = Vec::new();
            for page in &doc.pages {
                for key_seg in page.segments.iter().filter(|s| s.text == key_text) {
                    for other in &page.segments {
                        if std::ptr::eq(key_seg, other) {
                            continue;
                        }
                        if boxes_adjacent(key_seg.bbox, other.bbox) {
                            adjacent_values.push(other.text.clone());
                        }
                    }
                }
            }
            assert_eq!(adjacent_values, vec![q.answers[0].clone()], "q = {q:?}");
        }
    }

    /// Right- or below-adjacency with a small gap, mirroring the generator's
    /// pair placement. Test-side oracle, independent of generation code.
    fn boxes_adjacent(key: PixelBox, other: PixelBox) -> bool {
        let [kx1, ky1, kx2, ky2] = key.map(|v| v as i64);
        let [ox1, oy1, ox2, oy2] = other.map(|v| v as i64);
        let v_overlap = ky1 < oy2 && oy1 < ky2;
        let h_overlap = kx1 < ox2 && ox1 < kx2;
        let right = v_overlap && (ox1 - kx2).abs() <= 32;
        let below = h_overlap && (oy1 - ky2).abs() <= 48;
        right || below
    }

    #[test]
    fn value_pool_is_wide_and_well_separated() {
        let pool = value_pool();
        assert_eq!(pool.len(), 26);
        for (i, a) in pool.iter().enumerate() {
            assert_eq!(a.len(), 4);
            assert_eq!(a.as_bytes()[0], b'a' + i as u8);
            for b in &pool[i + 1..] {
                assert!(edit_distance(a, b) >= 3, "{a} vs {b}");
            }
        }
    }
}
