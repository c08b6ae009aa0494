//! Unified token-id space and modality routing.

use std::fmt;
use std::ops::Range;

/// Which stream a segment belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Prompt,
    Speech,
    Image,
    Text,
    Action,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Prompt,
        Modality::Speech,
        Modality::Image,
        Modality::Text,
        Modality::Action,
    ];

    pub fn letter(self) -> char {
        match self {
            Modality::Prompt => 'P',
            Modality::Speech => 'S',
            Modality::Image => 'I',
            Modality::Text => 'T',
            Modality::Action => 'A',
        }
    }

    /// Tag carried by payload tokens of this modality.
    pub fn payload_tag(self) -> ModalityTag {
        match self {
            Modality::Prompt => ModalityTag::Prompt,
            Modality::Speech => ModalityTag::SpeechIn,
            Modality::Image => ModalityTag::ImageIn,
            Modality::Text => ModalityTag::TextOut,
            Modality::Action => ModalityTag::ActionOut,
        }
    }
}

/// Per-token segment tag. Boundaries carry the modality they delimit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    SpeechIn,
    ImageIn,
    TextOut,
    ActionOut,
    Prompt,
    Boundary(Modality),
}

impl ModalityTag {
    pub const ALL: [ModalityTag; 10] = [
        ModalityTag::SpeechIn,
        ModalityTag::ImageIn,
        ModalityTag::TextOut,
        ModalityTag::ActionOut,
        ModalityTag::Prompt,
        ModalityTag::Boundary(Modality::Prompt),
        ModalityTag::Boundary(Modality::Speech),
        ModalityTag::Boundary(Modality::Image),
        ModalityTag::Boundary(Modality::Text),
        ModalityTag::Boundary(Modality::Action),
    ];

    pub fn modality(self) -> Modality {
        match self {
            ModalityTag::SpeechIn => Modality::Speech,
            ModalityTag::ImageIn => Modality::Image,
            ModalityTag::TextOut => Modality::Text,
            ModalityTag::ActionOut => Modality::Action,
            ModalityTag::Prompt => Modality::Prompt,
            ModalityTag::Boundary(m) => m,
        }
    }

    pub fn is_boundary(self) -> bool {
        matches!(self, ModalityTag::Boundary(_))
    }

    /// Vision and action entries fall out of the history window; the rest is kept forever.
    pub fn is_windowed(self) -> bool {
        matches!(self.modality(), Modality::Image | Modality::Action)
    }

    /// Stable single-byte code for serialization.
    pub fn code(self) -> u8 {
        match self {
            ModalityTag::SpeechIn => 0,
            ModalityTag::ImageIn => 1,
            ModalityTag::TextOut => 2,
            ModalityTag::ActionOut => 3,
            ModalityTag::Prompt => 4,
            ModalityTag::Boundary(m) => 5 + m as u8,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        ModalityTag::ALL.iter().copied().find(|t| t.code() == c)
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalityTag::SpeechIn => f.write_str("SPEECH_IN"),
            ModalityTag::ImageIn => f.write_str("IMAGE_IN"),
            ModalityTag::TextOut => f.write_str("TEXT_OUT"),
            ModalityTag::ActionOut => f.write_str("ACTION_OUT"),
            ModalityTag::Prompt => f.write_str("PROMPT"),
            ModalityTag::Boundary(m) => write!(f, "BOUNDARY({})", m.payload_tag()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertId {
    Speech,
    Action,
}

impl ExpertId {
    pub fn index(self) -> usize {
        match self {
            ExpertId::Speech => 0,
            ExpertId::Action => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertId::Speech => "speech_expert",
            ExpertId::Action => "action_expert",
        }
    }
}

/// Modality routing. Total over tags.
pub fn route(tag: ModalityTag) -> ExpertId {
    match tag.modality() {
        Modality::Speech | Modality::Text | Modality::Prompt => ExpertId::Speech,
        Modality::Image | Modality::Action => ExpertId::Action,
    }
}

/// Sizes of the contiguous payload ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabSizes {
    pub prompt: usize,
    pub speech: usize,
    pub image: usize,
    pub text: usize,
    pub action: usize,
}

/// Number of boundary ids at the bottom of the id space.
pub const N_BOUNDARY: usize = 10;

/// Layout: 10 boundary ids (open/close for prompt, speech, image, text,
/// action), then the payload ranges in that same order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    sizes: VocabSizes,
}

impl VocabLayout {
    pub fn new(sizes: VocabSizes) -> Self {
        Self { sizes }
    }

    pub fn sizes(&self) -> VocabSizes {
        self.sizes
    }

    pub fn total(&self) -> usize {
        let s = self.sizes;
        N_BOUNDARY + s.prompt + s.speech + s.image + s.text + s.action
    }

    fn size(&self, m: Modality) -> usize {
        match m {
            Modality::Prompt => self.sizes.prompt,
            Modality::Speech => self.sizes.speech,
            Modality::Image => self.sizes.image,
            Modality::Text => self.sizes.text,
            Modality::Action => self.sizes.action,
        }
    }

    pub fn payload(&self, m: Modality) -> Range<usize> {
        let mut start = N_BOUNDARY;
        for other in Modality::ALL {
            if other == m {
                break;
            }
            start += self.size(other);
        }
        start..start + self.size(m)
    }

    pub fn open(&self, m: Modality) -> usize {
        2 * m as usize
    }

    pub fn close(&self, m: Modality) -> usize {
        2 * m as usize + 1
    }

    /// Modality and openness of a boundary id.
    pub fn boundary_kind(&self, id: usize) -> Option<(Modality, bool)> {
        (id < N_BOUNDARY).then(|| (Modality::ALL[id / 2], id % 2 == 0))
    }

    pub fn modality_of(&self, id: usize) -> Option<Modality> {
        if let Some((m, _)) = self.boundary_kind(id) {
            return Some(m);
        }
        Modality::ALL.into_iter().find(|&m| self.payload(m).contains(&id))
    }

    /// Whether `id` may appear under `tag`.
    pub fn accepts(&self, tag: ModalityTag, id: usize) -> bool {
        match tag {
            ModalityTag::Boundary(m) => id == self.open(m) || id == self.close(m),
            t => self.payload(t.modality()).contains(&id),
        }
    }

    pub fn silence(&self) -> usize {
        self.payload(Modality::Text).start
    }

    pub fn text_pad(&self) -> usize {
        self.payload(Modality::Text).start + 1
    }

    pub fn noop(&self) -> usize {
        self.payload(Modality::Action).start
    }

    pub fn speech_pad(&self) -> usize {
        self.payload(Modality::Speech).start
    }

    pub fn full(&self) -> VocabSlice {
        VocabSlice::new(vec![0..self.total()])
    }

    /// Speech expert input: prompt, speech, text and their boundaries.
    pub fn speech_input(&self) -> VocabSlice {
        self.slice_for(&[Modality::Prompt, Modality::Speech, Modality::Text], true)
    }

    /// Text payload plus the closing text boundary.
    pub fn speech_output(&self) -> VocabSlice {
        let t = self.payload(Modality::Text);
        let c = self.close(Modality::Text);
        VocabSlice::new(vec![c..c + 1, t])
    }

    pub fn action_input(&self) -> VocabSlice {
        self.slice_for(&[Modality::Image, Modality::Action], true)
    }

    pub fn action_output(&self) -> VocabSlice {
        let a = self.payload(Modality::Action);
        let c = self.close(Modality::Action);
        VocabSlice::new(vec![c..c + 1, a])
    }

    /// Both output slices; used by the single-expert baseline.
    pub fn joint_output(&self) -> VocabSlice {
        let mut r = self.speech_output().ranges;
        r.extend(self.action_output().ranges);
        VocabSlice::new(r)
    }

    fn slice_for(&self, ms: &[Modality], boundaries: bool) -> VocabSlice {
        let mut ranges = Vec::new();
        if boundaries {
            for &m in ms {
                ranges.push(self.open(m)..self.close(m) + 1);
            }
        }
        for &m in ms {
            ranges.push(self.payload(m));
        }
        VocabSlice::new(ranges)
    }
}

/// Ordered union of id ranges with a dense local index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabSlice {
    ranges: Vec<Range<usize>>,
}

impl VocabSlice {
    pub fn new(ranges: Vec<Range<usize>>) -> Self {
        let ranges = ranges.into_iter().filter(|r| !r.is_empty()).collect();
        Self { ranges }
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&id))
    }

    pub fn local(&self, id: usize) -> Option<usize> {
        let mut base = 0;
        for r in &self.ranges {
            if r.contains(&id) {
                return Some(base + id - r.start);
            }
            base += r.len();
        }
        None
    }

    pub fn global(&self, local: usize) -> Option<usize> {
        let mut base = 0;
        for r in &self.ranges {
            if local < base + r.len() {
                return Some(r.start + local - base);
            }
            base += r.len();
        }
        None
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }

    /// Compact text form `a..b,c..d`.
    pub fn to_text(&self) -> String {
        self.ranges
            .iter()
            .map(|r| format!("{}..{}", r.start, r.end))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_text(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Self::new(Vec::new()));
        }
        let mut ranges = Vec::new();
        for part in s.split(',') {
            let (a, b) = part.split_once("..")?;
            ranges.push(a.trim().parse().ok()?..b.trim().parse().ok()?);
        }
        Some(Self::new(ranges))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(VocabSizes {
            prompt: 3,
            speech: 20,
            image: 12,
            text: 9,
            action: 7,
        })
    }

    #[test]
    fn routing_examples() {
        assert_eq!(route(ModalityTag::SpeechIn), ExpertId::Speech);
        assert_eq!(route(ModalityTag::ActionOut), ExpertId::Action);
        assert_eq!(route(ModalityTag::Boundary(Modality::Text)), ExpertId::Speech);
        assert_eq!(route(ModalityTag::Boundary(Modality::Image)), ExpertId::Action);
    }

    #[test]
    fn routing_is_total_and_follows_boundary_owner() {
        for tag in ModalityTag::ALL {
            let e = route(tag);
            if let ModalityTag::Boundary(m) = tag {
                assert_eq!(e, route(m.payload_tag()));
            }
            assert_eq!(ModalityTag::from_code(tag.code()), Some(tag));
        }
    }

    #[test]
    fn ranges_partition_the_id_space() {
        let l = layout();
        let mut seen = vec![0; l.total()];
        for m in Modality::ALL {
            seen[l.open(m)] += 1;
            seen[l.close(m)] += 1;
            for id in l.payload(m) {
                seen[id] += 1;
                assert_eq!(l.modality_of(id), Some(m));
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn slices_index_densely() {
        let l = layout();
        for s in [l.speech_input(), l.speech_output(), l.action_input(), l.action_output(), l.joint_output()] {
            for (i, id) in s.ids().enumerate() {
                assert_eq!(s.local(id), Some(i));
                assert_eq!(s.global(i), Some(id));
            }
            assert_eq!(s.global(s.len()), None);
            assert_eq!(VocabSlice::from_text(&s.to_text()), Some(s.clone()));
        }
        assert!(l.speech_output().contains(l.silence()));
        assert!(l.action_output().contains(l.noop()));
        assert!(!l.speech_input().contains(l.payload(Modality::Image).start));
    }
}
