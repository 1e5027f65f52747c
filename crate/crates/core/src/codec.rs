//! Vocabulary, bracket-syntax text form, and the three training formats.
//!
//! Every coordinate value owns a single token: `[x0]..[x(W-1)]` followed by
//! `[y0]..[y(H-1)]`. Ids are assigned in a fixed order (control tokens,
//! instruction words, x tokens, y tokens) so they never drift between runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Polygon};
use crate::synthdata::CropSample;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const IMG: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;

const CONTROL: [&str; 4] = ["PAD", "IMG", "BOS", "EOS"];

/// The extraction instruction, one entry per word token.
pub const INSTRUCTION: &[&str] = &[
    "Please", "extract", "the", "regular", "vector", "contour", "of", "the", "central", "building",
    "in", "the", "image", ",", "start", "from", "the", "left", "top", "corner", "and", "in",
    "clockwise", ".",
];

/// Decoded meaning of one id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Pad,
    Img,
    Bos,
    Eos,
    Word(usize),
    X(u32),
    Y(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    width: usize,
    height: usize,
    words: Vec<&'static str>,
}

impl Vocab {
    pub fn new(width: usize, height: usize) -> Self {
        let mut words: Vec<&'static str> = Vec::new();
        for w in INSTRUCTION {
            if !words.contains(w) {
                words.push(w);
            }
        }
        Self { width, height, words }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn words(&self) -> &[&'static str] {
        &self.words
    }

    fn word_base(&self) -> usize {
        CONTROL.len()
    }

    fn x_base(&self) -> usize {
        self.word_base() + self.words.len()
    }

    fn y_base(&self) -> usize {
        self.x_base() + self.width
    }

    pub fn size(&self) -> usize {
        self.y_base() + self.height
    }

    pub fn coordinate_count(&self) -> usize {
        self.width + self.height
    }

    pub fn x_token(&self, x: u32) -> TokenId {
        (self.x_base() + x as usize) as TokenId
    }

    pub fn y_token(&self, y: u32) -> TokenId {
        (self.y_base() + y as usize) as TokenId
    }

    pub fn word_token(&self, word: &str) -> Option<TokenId> {
        self.words.iter().position(|w| *w == word).map(|i| (self.word_base() + i) as TokenId)
    }

    pub fn is_coordinate(&self, id: TokenId) -> bool {
        let id = id as usize;
        id >= self.x_base() && id < self.size()
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        let id = id as usize;
        Some(match id {
            0 => Token::Pad,
            1 => Token::Img,
            2 => Token::Bos,
            3 => Token::Eos,
            i if i < self.x_base() => Token::Word(i - self.word_base()),
            i if i < self.y_base() => Token::X((i - self.x_base()) as u32),
            i if i < self.size() => Token::Y((i - self.y_base()) as u32),
            _ => return None,
        })
    }

    /// Ids of the fixed instruction sentence.
    pub fn instruction_ids(&self) -> Vec<TokenId> {
        INSTRUCTION.iter().map(|w| self.word_token(w).expect("lexicon word")).collect()
    }

    /// Renders ids in bracket syntax, e.g. `[x85][y32]`. Words are space-separated.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in ids {
            match self.token(id) {
                Some(Token::Word(i)) => {
                    out.push(' ');
                    out.push_str(self.words[i]);
                    prev_word = true;
                    continue;
                }
                Some(t) => {
                    if prev_word {
                        out.push(' ');
                    }
                    match t {
                        Token::X(v) => out.push_str(&format!("[x{v}]")),
                        Token::Y(v) => out.push_str(&format!("[y{v}]")),
                        Token::Word(_) => unreachable!(),
                        other => out.push_str(&format!("[{}]", CONTROL[other_index(other)])),
                    }
                }
                None => out.push_str(&format!("[?{id}]")),
            }
            prev_word = false;
        }
        out
    }

    /// Parses bracket syntax back to ids. `[image]` is accepted for `[IMG]`.
    pub fn parse(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        let mut chars = text.char_indices().peekable();
        while let Some((start, c)) = chars.next() {
            if c.is_whitespace() {
                continue;
            }
            if c == '[' {
                let mut end = None;
                for (i, d) in chars.by_ref() {
                    if d == ']' {
                        end = Some(i);
                        break;
                    }
                }
                let end = end.ok_or_else(|| Error::UnknownToken(text[start..].to_string()))?;
                ids.push(self.parse_bracket(&text[start + 1..end])?);
                continue;
            }
            if c == ',' || c == '.' {
                ids.push(self.word_lookup(&text[start..start + 1])?);
                continue;
            }
            let mut end = text.len();
            while let Some(&(i, d)) = chars.peek() {
                if d.is_whitespace() || d == '[' || d == ',' || d == '.' {
                    end = i;
                    break;
                }
                chars.next();
            }
            ids.push(self.word_lookup(&text[start..end])?);
        }
        Ok(ids)
    }

    fn word_lookup(&self, w: &str) -> Result<TokenId> {
        self.word_token(w).ok_or_else(|| Error::UnknownToken(w.to_string()))
    }

    fn parse_bracket(&self, inner: &str) -> Result<TokenId> {
        if let Some(i) = CONTROL.iter().position(|c| *c == inner) {
            return Ok(i as TokenId);
        }
        if inner == "image" {
            return Ok(IMG);
        }
        let bad = || Error::UnknownToken(format!("[{inner}]"));
        let (axis, digits) = inner.split_at(1.min(inner.len()));
        let v: u32 = digits.parse().map_err(|_| bad())?;
        match axis {
            "x" if (v as usize) < self.width => Ok(self.x_token(v)),
            "y" if (v as usize) < self.height => Ok(self.y_token(v)),
            _ => Err(bad()),
        }
    }
}

fn other_index(t: Token) -> usize {
    match t {
        Token::Pad => 0,
        Token::Img => 1,
        Token::Bos => 2,
        Token::Eos => 3,
        _ => unreachable!(),
    }
}

/// Ids with a per-position loss mask.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: TokenId, trained: bool) {
        self.ids.push(id);
        self.loss_mask.push(trained);
    }

    fn extend(&mut self, ids: &[TokenId], trained: bool) {
        for &id in ids {
            self.push(id, trained);
        }
    }

    /// Ids of the positions that carry loss.
    pub fn masked_ids(&self) -> Vec<TokenId> {
        self.ids.iter().zip(&self.loss_mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect()
    }

    /// Concatenates a prompt with a fully trained answer span.
    pub fn with_answer(prompt: &TokenSequence, answer: &[TokenId]) -> TokenSequence {
        let mut s = prompt.clone();
        s.extend(answer, true);
        s
    }
}

/// Prompt plus the two answers of one preference example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: TokenSequence,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub sample_ref: String,
}

impl PreferencePair {
    pub fn chosen_sequence(&self) -> TokenSequence {
        TokenSequence::with_answer(&self.prompt, &self.chosen)
    }

    pub fn rejected_sequence(&self) -> TokenSequence {
        TokenSequence::with_answer(&self.prompt, &self.rejected)
    }
}

/// `[x][y]` per vertex followed by the first vertex again.
pub fn encode_polygon(vocab: &Vocab, p: &Polygon) -> Result<Vec<TokenId>> {
    let mut ids = Vec::with_capacity(2 * (p.len() + 1));
    for &(x, y) in p.vertices().iter().chain(p.vertices().first()) {
        if x < 0 || y < 0 || x as usize >= vocab.width || y as usize >= vocab.height {
            return Err(Error::CoordinateOutOfRange {
                x: x as i64,
                y: y as i64,
                w: vocab.width,
                h: vocab.height,
            });
        }
        ids.push(vocab.x_token(x as u32));
        ids.push(vocab.y_token(y as u32));
    }
    Ok(ids)
}

/// Lenient inverse of [`encode_polygon`] for arbitrary model output.
///
/// Stops at the first `[EOS]`, skips `[PAD]`, requires strict x/y
/// alternation, drops a repeated closing vertex and collapses repeats.
pub fn decode_tokens(vocab: &Vocab, ids: &[TokenId]) -> Result<Polygon> {
    let mut verts = Vec::new();
    let mut pending_x: Option<u32> = None;
    for (i, &id) in ids.iter().enumerate() {
        match vocab.token(id) {
            Some(Token::Eos) => break,
            Some(Token::Pad) => continue,
            Some(Token::X(x)) => {
                if pending_x.is_some() {
                    return Err(Error::MalformedAlternation(i));
                }
                pending_x = Some(x);
            }
            Some(Token::Y(y)) => match pending_x.take() {
                Some(x) => verts.push((x as i32, y as i32)),
                None => return Err(Error::MalformedAlternation(i)),
            },
            _ => return Err(Error::MalformedAlternation(i)),
        }
    }
    if pending_x.is_some() {
        return Err(Error::MalformedAlternation(ids.len()));
    }
    verts.dedup();
    while verts.len() > 1 && verts.first() == verts.last() {
        verts.pop();
    }
    if verts.len() < 3 {
        return Err(Error::TooFewVertices(verts.len()));
    }
    Polygon::new(verts)
}

/// `[IMG]` then the contour from a random start vertex, then `[EOS]`.
pub fn format_pretrain<R: Rng + ?Sized>(
    vocab: &Vocab,
    sample: &CropSample,
    rng: &mut R,
) -> Result<TokenSequence> {
    let offset = rng.random_range(0..sample.gt.len());
    format_pretrain_at(vocab, sample, offset)
}

/// [`format_pretrain`] with an explicit start offset.
pub fn format_pretrain_at(vocab: &Vocab, sample: &CropSample, offset: usize) -> Result<TokenSequence> {
    let ring = geometry::rotate_start(&sample.gt, offset)?;
    let mut s = TokenSequence::default();
    s.push(IMG, false);
    s.extend(&encode_polygon(vocab, &ring)?, true);
    s.push(EOS, true);
    Ok(s)
}

/// `[IMG][BOS]` + instruction, all untrained.
pub fn sft_prompt(vocab: &Vocab) -> TokenSequence {
    let mut s = TokenSequence::default();
    s.push(IMG, false);
    s.push(BOS, false);
    s.extend(&vocab.instruction_ids(), false);
    s
}

/// Encoded contour plus `[EOS]`.
pub fn answer_ids(vocab: &Vocab, p: &Polygon) -> Result<Vec<TokenId>> {
    let mut a = encode_polygon(vocab, p)?;
    a.push(EOS);
    Ok(a)
}

/// Instruction prompt followed by the canonical answer.
pub fn format_sft(vocab: &Vocab, sample: &CropSample) -> Result<TokenSequence> {
    Ok(TokenSequence::with_answer(&sft_prompt(vocab), &answer_ids(vocab, &sample.gt)?))
}

pub fn format_dpo(vocab: &Vocab, sample: &CropSample, rejected: &Polygon) -> Result<PreferencePair> {
    let rejected = geometry::canonicalize(rejected)?;
    Ok(PreferencePair {
        prompt: sft_prompt(vocab),
        chosen: answer_ids(vocab, &sample.gt)?,
        rejected: answer_ids(vocab, &rejected)?,
        sample_ref: sample.source_id.clone(),
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::GrayImage;

    const PRINTED: &str = "[x85][y32][x160][y63][x135][y122][x176][y139][x154][y191][x103][y169][x111][y150][x46][y124][x85][y32]";

    fn printed_polygon() -> Polygon {
        Polygon::new(vec![
            (85, 32),
            (160, 63),
            (135, 122),
            (176, 139),
            (154, 191),
            (103, 169),
            (111, 150),
            (46, 124),
        ])
        .unwrap()
    }

    fn sample(gt: Polygon) -> CropSample {
        CropSample::new(GrayImage::filled(128, 128, 0), gt, "t".into(), 1.3)
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::new(128, 128);
        assert_eq!(v.words().len(), 20);
        assert_eq!(v.coordinate_count(), 256);
        assert_eq!(v.size(), 4 + 20 + 256);
        assert_eq!(v.token(v.x_token(0)), Some(Token::X(0)));
        assert_eq!(v.token(v.y_token(127)), Some(Token::Y(127)));
        assert_eq!(v.token(v.size() as u32), None);
    }

    #[test]
    fn printed_sample_round_trip() {
        let v = Vocab::new(256, 256);
        let ids = encode_polygon(&v, &printed_polygon()).unwrap();
        assert_eq!(v.render(&ids), PRINTED);
        assert_eq!(v.parse(PRINTED).unwrap(), ids);
        assert_eq!(decode_tokens(&v, &ids).unwrap(), printed_polygon());
    }

    #[test]
    fn encode_bounds() {
        let v = Vocab::new(128, 128);
        assert!(matches!(
            encode_polygon(&v, &printed_polygon()),
            Err(Error::CoordinateOutOfRange { .. })
        ));
        let tri = Polygon::new(vec![(0, 0), (5, 0), (0, 5)]).unwrap();
        let ids = encode_polygon(&v, &tri).unwrap();
        assert_eq!(ids.len(), 8);
        assert!(v.render(&ids).ends_with("[x0][y0]"));
    }

    #[test]
    fn decode_cases() {
        let v = Vocab::new(128, 128);
        let tri = v.parse("[x0][y0][x5][y0][x0][y5][x0][y0]").unwrap();
        assert_eq!(decode_tokens(&v, &tri).unwrap().vertices(), &[(0, 0), (5, 0), (0, 5)]);
        let bad = v.parse("[x0][x1][y2]").unwrap();
        assert!(matches!(decode_tokens(&v, &bad), Err(Error::MalformedAlternation(_))));
        let dangling = v.parse("[x0][y0][x1][y2][x3][y3][x4]").unwrap();
        assert!(matches!(decode_tokens(&v, &dangling), Err(Error::MalformedAlternation(_))));
        let short = v.parse("[x0][y0][x1][y1][x1][y1][x0][y0]").unwrap();
        assert!(matches!(decode_tokens(&v, &short), Err(Error::TooFewVertices(2))));
        // eos truncation and pad skipping
        let mut ids = v.parse("[x0][y0][PAD][x5][y0][x0][y5][EOS][x9]").unwrap();
        assert_eq!(decode_tokens(&v, &ids).unwrap().len(), 3);
        ids.insert(0, BOS);
        assert!(decode_tokens(&v, &ids).is_err());
    }

    #[test]
    fn parse_words_and_control() {
        let v = Vocab::new(128, 128);
        let prompt = sft_prompt(&v);
        let text = v.render(&prompt.ids);
        assert!(text.starts_with("[IMG][BOS] Please extract the regular"));
        assert_eq!(v.parse(&text).unwrap(), prompt.ids);
        let alt = v.parse("[image] Please extract the regular vector contour of the central building in the image, start from the left top corner and in clockwise.").unwrap();
        assert_eq!(&alt[1..], &v.instruction_ids()[..]);
        assert!(v.parse("[z3]").is_err());
        assert!(v.parse("[x128]").is_err());
        assert!(v.parse("hello").is_err());
    }

    #[test]
    fn pretrain_mask_arithmetic() {
        let v = Vocab::new(128, 128);
        let gt = Polygon::new(vec![(10, 10), (50, 10), (50, 40), (10, 40)]).unwrap();
        let s = sample(gt.clone());
        for off in 0..4 {
            let seq = format_pretrain_at(&v, &s, off).unwrap();
            assert_eq!(seq.loss_mask.iter().filter(|m| !**m).count(), 1);
            assert_eq!(seq.loss_mask.iter().filter(|m| **m).count(), 2 * (4 + 1) + 1);
            assert!(!seq.loss_mask[0]);
            let dec = decode_tokens(&v, &seq.ids[1..]).unwrap();
            assert_eq!(geometry::canonicalize(&dec).unwrap(), gt);
        }
        let zero = format_pretrain_at(&v, &s, 0).unwrap();
        assert_eq!(&zero.ids[1..zero.len() - 1], &encode_polygon(&v, &gt).unwrap()[..]);
    }

    #[test]
    fn sft_layout() {
        let v = Vocab::new(128, 128);
        let gt = Polygon::new(vec![(10, 10), (50, 10), (50, 40), (10, 40)]).unwrap();
        let seq = format_sft(&v, &sample(gt.clone())).unwrap();
        let p = sft_prompt(&v);
        assert_eq!(&seq.ids[..p.len()], &p.ids[..]);
        assert!(seq.loss_mask[..p.len()].iter().all(|m| !m));
        assert!(seq.loss_mask[p.len()..].iter().all(|m| *m));
        let enc = encode_polygon(&v, &gt).unwrap();
        assert_eq!(&seq.ids[p.len()..seq.len() - 1], &enc[..]);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert_eq!(v.instruction_ids(), v.instruction_ids());
    }

    #[test]
    fn dpo_pair_shapes() {
        let v = Vocab::new(128, 128);
        let gt = Polygon::new(vec![(10, 10), (50, 10), (50, 40), (10, 40)]).unwrap();
        let s = sample(gt.clone());
        let same = format_dpo(&v, &s, &gt).unwrap();
        assert_eq!(same.chosen, same.rejected);
        let rej = Polygon::new(vec![(10, 40), (50, 40), (50, 10)]).unwrap();
        let pair = format_dpo(&v, &s, &rej).unwrap();
        assert_eq!(pair.chosen_sequence().ids[..pair.prompt.len()], pair.rejected_sequence().ids[..pair.prompt.len()]);
        assert!(decode_tokens(&v, &pair.chosen).is_ok());
        assert_eq!(
            decode_tokens(&v, &pair.rejected).unwrap(),
            geometry::canonicalize(&rej).unwrap()
        );
    }
}
