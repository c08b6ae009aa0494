//! Interleaved block stream: encoding, validation and history retention.

use std::fmt;

use crate::model::vocab::{Modality, ModalityTag, VocabLayout};
use crate::model::{BlockGeometry, SeqToken, UnifiedKVCache};

pub type Tagged = (usize, ModalityTag);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Default,
    SpeechOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Default => "default",
            Mode::SpeechOnly => "speech-only",
        }
    }
}

/// One tick of the stream. An empty `images` list is the speech-only form.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub tick: usize,
    pub speech: Vec<usize>,
    pub images: Vec<Vec<usize>>,
    pub text: Vec<usize>,
    pub action: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecErrorKind {
    OrderViolation,
    Unbalanced,
    Oversize,
    WrongLength,
    OutOfSlice,
    TagMismatch,
    ModeMismatch,
    DuplicatePrompt,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct CodecError {
    pub offset: usize,
    pub kind: CodecErrorKind,
    pub expected: String,
    pub found: String,
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} at token {}: expected {}, found {}",
            self.kind, self.offset, self.expected, self.found
        )
    }
}

fn err(offset: usize, kind: CodecErrorKind, expected: impl Into<String>, found: impl Into<String>) -> CodecError {
    CodecError {
        offset,
        kind,
        expected: expected.into(),
        found: found.into(),
    }
}

pub fn token_name(layout: &VocabLayout, id: usize) -> String {
    if let Some((m, open)) = layout.boundary_kind(id) {
        let l = m.letter().to_ascii_lowercase();
        return if open { format!("<bo{l}>") } else { format!("<eo{l}>") };
    }
    match layout.modality_of(id) {
        Some(m) => format!("{}:{}", m.letter(), id - layout.payload(m).start),
        None => format!("#{id}"),
    }
}

fn check_payload(layout: &VocabLayout, m: Modality, ids: &[usize], offset: usize) -> Result<(), CodecError> {
    let r = layout.payload(m);
    for (i, &id) in ids.iter().enumerate() {
        if !r.contains(&id) {
            return Err(err(
                offset + i,
                CodecErrorKind::OutOfSlice,
                format!("{} token in {}..{}", m.letter(), r.start, r.end),
                token_name(layout, id),
            ));
        }
    }
    Ok(())
}

fn push_segment(out: &mut Vec<Tagged>, layout: &VocabLayout, m: Modality, ids: &[usize]) {
    out.push((layout.open(m), ModalityTag::Boundary(m)));
    out.extend(ids.iter().map(|&id| (id, m.payload_tag())));
    out.push((layout.close(m), ModalityTag::Boundary(m)));
}

/// `<bop> p… <eop>`.
pub fn prompt_prefix(layout: &VocabLayout, prompt: &[usize]) -> Result<Vec<Tagged>, CodecError> {
    check_payload(layout, Modality::Prompt, prompt, 1)?;
    let mut out = Vec::with_capacity(prompt.len() + 2);
    push_segment(&mut out, layout, Modality::Prompt, prompt);
    Ok(out)
}

/// Serialise one block. Offsets in errors are relative to the block start.
pub fn encode_block(block: &Block, mode: Mode, geo: &BlockGeometry, layout: &VocabLayout) -> Result<Vec<Tagged>, CodecError> {
    let mut out = Vec::new();
    let len_err = |off: usize, what: &str, want: String, got: usize| {
        err(off, CodecErrorKind::WrongLength, format!("{what} payload of {want}"), format!("{got} tokens"))
    };
    if block.speech.len() != geo.speech {
        return Err(len_err(0, "speech", geo.speech.to_string(), block.speech.len()));
    }
    check_payload(layout, Modality::Speech, &block.speech, 1)?;
    push_segment(&mut out, layout, Modality::Speech, &block.speech);
    match mode {
        Mode::SpeechOnly => {
            if !block.images.is_empty() {
                return Err(err(
                    out.len(),
                    CodecErrorKind::ModeMismatch,
                    "no image segments in speech-only mode",
                    format!("{} image segments", block.images.len()),
                ));
            }
            push_segment(&mut out, layout, Modality::Image, &[]);
        }
        Mode::Default => {
            if block.images.len() != geo.n_img {
                return Err(err(
                    out.len(),
                    CodecErrorKind::ModeMismatch,
                    format!("{} image segments", geo.n_img),
                    format!("{}", block.images.len()),
                ));
            }
            for img in &block.images {
                if img.len() != geo.image {
                    return Err(len_err(out.len(), "image", geo.image.to_string(), img.len()));
                }
                check_payload(layout, Modality::Image, img, out.len() + 1)?;
                push_segment(&mut out, layout, Modality::Image, img);
            }
        }
    }
    let silence = block.text == [layout.silence()];
    if !(silence || block.text.len() == geo.text) {
        return Err(len_err(out.len(), "text", format!("{} or a lone <silence>", geo.text), block.text.len()));
    }
    check_payload(layout, Modality::Text, &block.text, out.len() + 1)?;
    push_segment(&mut out, layout, Modality::Text, &block.text);
    if block.action.len() != geo.action {
        return Err(len_err(out.len(), "action", geo.action.to_string(), block.action.len()));
    }
    check_payload(layout, Modality::Action, &block.action, out.len() + 1)?;
    if mode == Mode::SpeechOnly {
        if let Some(i) = block.action.iter().position(|&a| a != layout.noop()) {
            return Err(err(
                out.len() + 1 + i,
                CodecErrorKind::ModeMismatch,
                "<noop> actions in speech-only mode",
                token_name(layout, block.action[i]),
            ));
        }
    }
    push_segment(&mut out, layout, Modality::Action, &block.action);
    Ok(out)
}

/// Attach ticks to an encoded block for model consumption.
pub fn with_tick(tokens: &[Tagged], tick: usize) -> Vec<SeqToken> {
    tokens.iter().map(|&(id, tag)| SeqToken { id, tag, tick }).collect()
}

/// Segments of an unfinished trailing block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partial {
    pub segments: Vec<(Modality, Vec<usize>)>,
    pub open: Option<(Modality, Vec<usize>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Decoded {
    pub prompt: Option<Vec<usize>>,
    pub mode: Option<Mode>,
    pub blocks: Vec<Block>,
    pub partial: Option<Partial>,
}

enum Seg {
    Done(Vec<usize>),
    Eof(Option<Vec<usize>>),
}

struct Parser<'a> {
    toks: &'a [Tagged],
    pos: usize,
    layout: &'a VocabLayout,
    geo: &'a BlockGeometry,
}

impl Parser<'_> {
    fn name(&self, t: Tagged) -> String {
        format!("{} [{}]", token_name(self.layout, t.0), t.1)
    }

    fn capacity(&self, m: Modality) -> usize {
        match m {
            Modality::Prompt => usize::MAX,
            Modality::Speech => self.geo.speech,
            Modality::Image => self.geo.image,
            Modality::Text => self.geo.text,
            Modality::Action => self.geo.action,
        }
    }

    fn check_tag(&self, t: Tagged) -> Result<(), CodecError> {
        if !self.layout.accepts(t.1, t.0) {
            return Err(err(
                self.pos,
                CodecErrorKind::TagMismatch,
                format!("a token belonging to {}", t.1),
                token_name(self.layout, t.0),
            ));
        }
        Ok(())
    }

    fn segment(&mut self, m: Modality) -> Result<Seg, CodecError> {
        let Some(&t) = self.toks.get(self.pos) else {
            return Ok(Seg::Eof(None));
        };
        self.check_tag(t)?;
        let open = self.layout.open(m);
        if t.0 != open {
            let kind = if t.1 == ModalityTag::Boundary(Modality::Prompt) {
                CodecErrorKind::DuplicatePrompt
            } else if self.layout.boundary_kind(t.0).is_some_and(|(_, o)| !o) {
                CodecErrorKind::Unbalanced
            } else {
                CodecErrorKind::OrderViolation
            };
            return Err(err(self.pos, kind, token_name(self.layout, open), self.name(t)));
        }
        self.pos += 1;
        let mut payload = Vec::new();
        loop {
            let Some(&t) = self.toks.get(self.pos) else {
                return Ok(Seg::Eof(Some(payload)));
            };
            self.check_tag(t)?;
            if t.0 == self.layout.close(m) {
                self.pos += 1;
                return Ok(Seg::Done(payload));
            }
            if t.1 != m.payload_tag() {
                return Err(err(
                    self.pos,
                    CodecErrorKind::Unbalanced,
                    format!("{} payload or {}", m.letter(), token_name(self.layout, self.layout.close(m))),
                    self.name(t),
                ));
            }
            if payload.len() == self.capacity(m) {
                return Err(err(
                    self.pos,
                    CodecErrorKind::Oversize,
                    format!("at most {} {} tokens", self.capacity(m), m.letter()),
                    format!("extra {}", self.name(t)),
                ));
            }
            payload.push(t.0);
            self.pos += 1;
        }
    }
}

/// Parse and validate a token stream. A trailing unfinished block is returned as `partial`.
pub fn decode_stream(toks: &[Tagged], geo: &BlockGeometry, layout: &VocabLayout) -> Result<Decoded, CodecError> {
    let mut p = Parser {
        toks,
        pos: 0,
        layout,
        geo,
    };
    let mut out = Decoded::default();
    if toks.first().map(|t| t.1) == Some(ModalityTag::Boundary(Modality::Prompt)) {
        match p.segment(Modality::Prompt)? {
            Seg::Done(pl) => out.prompt = Some(pl),
            Seg::Eof(open) => {
                out.partial = Some(Partial {
                    segments: Vec::new(),
                    open: Some((Modality::Prompt, open.unwrap_or_default())),
                });
                return Ok(out);
            }
        }
    }
    let mut tick = 0;
    while p.pos < toks.len() {
        let mut done: Vec<(Modality, Vec<usize>)> = Vec::new();
        macro_rules! seg {
            ($m:expr) => {{
                let start = p.pos;
                match p.segment($m)? {
                    Seg::Done(pl) => (start, pl),
                    Seg::Eof(open) => {
                        out.partial = Some(Partial {
                            segments: done,
                            open: open.map(|pl| ($m, pl)),
                        });
                        return Ok(out);
                    }
                }
            }};
        }
        let (s0, speech) = seg!(Modality::Speech);
        if speech.len() != geo.speech {
            return Err(err(
                s0,
                CodecErrorKind::WrongLength,
                format!("{} speech tokens", geo.speech),
                format!("{}", speech.len()),
            ));
        }
        done.push((Modality::Speech, speech.clone()));
        let mut images = Vec::new();
        let (i0, first) = seg!(Modality::Image);
        done.push((Modality::Image, first.clone()));
        let block_mode = if first.is_empty() { Mode::SpeechOnly } else { Mode::Default };
        if block_mode == Mode::Default {
            images.push(first);
            while images.len() < geo.n_img {
                let (_, img) = seg!(Modality::Image);
                done.push((Modality::Image, img.clone()));
                images.push(img);
            }
            for img in &images {
                if img.len() != geo.image {
                    return Err(err(
                        i0,
                        CodecErrorKind::WrongLength,
                        format!("{} image tokens", geo.image),
                        format!("{}", img.len()),
                    ));
                }
            }
        }
        match out.mode {
            None => out.mode = Some(block_mode),
            Some(m) if m != block_mode => {
                return Err(err(i0, CodecErrorKind::ModeMismatch, m.name(), block_mode.name()));
            }
            _ => {}
        }
        let (t0, text) = seg!(Modality::Text);
        if !(text == [layout.silence()] || text.len() == geo.text) {
            return Err(err(
                t0,
                CodecErrorKind::WrongLength,
                format!("{} text tokens or a lone <silence>", geo.text),
                format!("{}", text.len()),
            ));
        }
        done.push((Modality::Text, text.clone()));
        let (a0, action) = seg!(Modality::Action);
        if action.len() != geo.action {
            return Err(err(
                a0,
                CodecErrorKind::WrongLength,
                format!("{} action tokens", geo.action),
                format!("{}", action.len()),
            ));
        }
        if block_mode == Mode::SpeechOnly {
            if let Some(i) = action.iter().position(|&a| a != layout.noop()) {
                return Err(err(
                    a0 + 1 + i,
                    CodecErrorKind::ModeMismatch,
                    "<noop> in speech-only mode",
                    token_name(layout, action[i]),
                ));
            }
        }
        out.blocks.push(Block {
            tick,
            speech,
            images,
            text,
            action,
        });
        tick += 1;
    }
    Ok(out)
}

/// Retention window for vision and action history. `None` keeps everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryPolicy {
    pub horizon: Option<usize>,
}

impl Default for HistoryPolicy {
    fn default() -> Self {
        Self { horizon: Some(2) }
    }
}

/// Drop image/action entries (with their boundaries) older than `current − H`.
/// Returns the number of entries removed.
pub fn truncate_history(cache: &mut UnifiedKVCache, current_tick: usize, policy: HistoryPolicy) -> usize {
    let Some(h) = policy.horizon else {
        return 0;
    };
    cache.retain(|e| !e.tag.is_windowed() || e.tick + h >= current_tick)
}

fn fmt_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// `S[..] I[..] T[..] A[..]` with one block per line; the prompt, if any, leads as `P[..]`.
pub fn dump(prompt: Option<&[usize]>, blocks: &[Block]) -> String {
    let mut s = String::new();
    if let Some(p) = prompt {
        s.push_str(&format!("P[{}]\n", fmt_ids(p)));
    }
    for b in blocks {
        s.push_str(&format!("S[{}]", fmt_ids(&b.speech)));
        if b.images.is_empty() {
            s.push_str(" I[]");
        }
        for img in &b.images {
            s.push_str(&format!(" I[{}]", fmt_ids(img)));
        }
        s.push_str(&format!(" T[{}] A[{}]\n", fmt_ids(&b.text), fmt_ids(&b.action)));
    }
    s
}

/// Inverse of [`dump`].
pub fn parse_dump(text: &str) -> Result<(Option<Vec<usize>>, Vec<Block>), String> {
    let mut prompt = None;
    let mut blocks = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut segs: Vec<(char, Vec<usize>)> = Vec::new();
        let mut rest = line;
        while !rest.is_empty() {
            let tag = rest.chars().next().unwrap();
            let body = rest[1..]
                .strip_prefix('[')
                .ok_or_else(|| format!("line {}: expected '[' after {tag}", ln + 1))?;
            let end = body.find(']').ok_or_else(|| format!("line {}: unclosed segment", ln + 1))?;
            let ids = body[..end]
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| format!("line {}: bad token {t:?}", ln + 1)))
                .collect::<Result<Vec<usize>, _>>()?;
            segs.push((tag, ids));
            rest = body[end + 1..].trim_start();
        }
        if let [('P', p)] = segs.as_slice() {
            prompt = Some(p.clone());
            continue;
        }
        let mut b = Block {
            tick: blocks.len(),
            speech: Vec::new(),
            images: Vec::new(),
            text: Vec::new(),
            action: Vec::new(),
        };
        let order: String = segs.iter().map(|s| s.0).collect();
        let valid = order.starts_with("SI") && order.ends_with("TA") && order[1..order.len() - 2].chars().all(|c| c == 'I');
        if !valid {
            return Err(format!("line {}: segment order {order:?}", ln + 1));
        }
        for (tag, ids) in segs {
            match tag {
                'S' => b.speech = ids,
                'I' if !ids.is_empty() => b.images.push(ids),
                'I' => {}
                'T' => b.text = ids,
                'A' => b.action = ids,
                _ => unreachable!(),
            }
        }
        blocks.push(b);
    }
    Ok((prompt, blocks))
}
