//! Templates: token sequences whose blanks (`__m__`) are filled one at a time.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::vocab::{tokenize, BLANK_MARKER, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Known,
    Blank,
    Filled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    /// 1-based position of the segment in its template.
    pub seg_id: usize,
    pub kind: SegmentKind,
    /// Empty for blanks, and for fills of empty masks.
    pub tokens: Vec<String>,
}

/// Ordered segments alternating between known text and blanks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    /// Parses space-separated text where each standalone `__m__` is a blank.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(&tokenize(text, false))
    }

    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Format("empty template".into()));
        }
        let mut segments: Vec<Segment> = Vec::new();
        for tok in tokens {
            if tok == BLANK_MARKER {
                if matches!(segments.last(), Some(s) if s.kind == SegmentKind::Blank) {
                    return Err(Error::Format(
                        "adjacent blanks: blanks must be separated by known text".into(),
                    ));
                }
                segments.push(Segment { seg_id: segments.len() + 1, kind: SegmentKind::Blank, tokens: vec![] });
            } else {
                if tok.contains(BLANK_MARKER) {
                    return Err(Error::Format(format!("blank marker must be a standalone token: '{tok}'")));
                }
                match segments.last_mut() {
                    Some(s) if s.kind == SegmentKind::Known => s.tokens.push(tok.clone()),
                    _ => segments.push(Segment {
                        seg_id: segments.len() + 1,
                        kind: SegmentKind::Known,
                        tokens: vec![tok.clone()],
                    }),
                }
            }
        }
        Ok(Template { segments })
    }

    /// Builds a template from pre-formed segments, validating the structural invariants.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if s.seg_id != i + 1 {
                return Err(Error::Contract(format!("segment ids must be 1..n, found {} at {i}", s.seg_id)));
            }
            if s.kind == SegmentKind::Blank && !s.tokens.is_empty() {
                return Err(Error::Contract("blank segment with tokens".into()));
            }
            if s.kind == SegmentKind::Known && s.tokens.is_empty() {
                return Err(Error::Contract("empty known segment".into()));
            }
        }
        for w in segments.windows(2) {
            if w[0].kind == SegmentKind::Known && w[1].kind == SegmentKind::Known {
                return Err(Error::Contract("adjacent known segments must be merged".into()));
            }
            if w[0].kind == SegmentKind::Blank && w[1].kind == SegmentKind::Blank {
                return Err(Error::Contract("adjacent blanks".into()));
            }
        }
        Ok(Template { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, seg_id: usize) -> Option<&Segment> {
        seg_id.checked_sub(1).and_then(|i| self.segments.get(i))
    }

    /// Ascending seg_ids of the remaining blanks.
    pub fn blank_set(&self) -> Vec<usize> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Blank).map(|s| s.seg_id).collect()
    }

    pub fn num_blanks(&self) -> usize {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Blank).count()
    }

    pub fn is_complete(&self) -> bool {
        self.num_blanks() == 0
    }

    /// Returns a copy with blank `seg_id` replaced by `fill`.
    pub fn update(&self, seg_id: usize, fill: Vec<String>) -> Result<Self> {
        match self.segment(seg_id) {
            Some(s) if s.kind == SegmentKind::Blank => {}
            _ => return Err(Error::Contract(format!("segment {seg_id} is not a blank"))),
        }
        if let Some(bad) = fill.iter().find(|t| t.as_str() == BLANK_MARKER || RESERVED.contains(&t.as_str())) {
            return Err(Error::Contract(format!("fill contains reserved token '{bad}'")));
        }
        let mut next = self.clone();
        let seg = &mut next.segments[seg_id - 1];
        seg.kind = SegmentKind::Filled;
        seg.tokens = fill;
        Ok(next)
    }

    /// Concatenated tokens of a fully filled template.
    pub fn reconstruct(&self) -> Result<Vec<String>> {
        if let Some(id) = self.blank_set().first() {
            return Err(Error::Contract(format!("segment {id} is still blank")));
        }
        Ok(self.segments.iter().flat_map(|s| s.tokens.iter().cloned()).collect())
    }

    /// Known and filled tokens only, blanks dropped.
    pub fn visible_tokens(&self) -> Vec<String> {
        self.segments.iter().flat_map(|s| s.tokens.iter().cloned()).collect()
    }

    /// Token view with blanks written as `__m__`.
    pub fn render_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.segments {
            match s.kind {
                SegmentKind::Blank => out.push(BLANK_MARKER.to_string()),
                _ => out.extend(s.tokens.iter().cloned()),
            }
        }
        out
    }

    pub fn render(&self) -> String {
        self.render_tokens().join(" ")
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// A template, the golden fill of each blank, and the original sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfillExample {
    pub template: Template,
    pub golden: BTreeMap<usize, Vec<String>>,
    pub original: Vec<String>,
}

impl InfillExample {
    /// Masks `spans` of `tokens`. A span `(start, len)` with `len == 0` is an
    /// empty mask at the boundary before `start`. Spans must be sorted and
    /// separated by at least one known token.
    pub fn from_spans(tokens: &[String], spans: &[(usize, usize)]) -> Result<Self> {
        let n = tokens.len();
        let mut segments: Vec<Segment> = Vec::new();
        let mut golden = BTreeMap::new();
        let mut cursor = 0;
        let push_known = |segments: &mut Vec<Segment>, from: usize, to: usize| {
            if from < to {
                segments.push(Segment {
                    seg_id: segments.len() + 1,
                    kind: SegmentKind::Known,
                    tokens: tokens[from..to].to_vec(),
                });
            }
        };
        for (k, &(start, len)) in spans.iter().enumerate() {
            if start + len > n {
                return Err(Error::Contract(format!("span ({start},{len}) outside {n} tokens")));
            }
            if start < cursor || (k > 0 && start == cursor) {
                return Err(Error::Contract(format!(
                    "span ({start},{len}) overlaps or touches the previous blank"
                )));
            }
            push_known(&mut segments, cursor, start);
            let seg_id = segments.len() + 1;
            segments.push(Segment { seg_id, kind: SegmentKind::Blank, tokens: vec![] });
            golden.insert(seg_id, tokens[start..start + len].to_vec());
            cursor = start + len;
        }
        push_known(&mut segments, cursor, n);
        let template = Template::from_segments(segments)?;
        Ok(InfillExample { template, golden, original: tokens.to_vec() })
    }

    /// Parses `template<TAB>original`, recovering golden fills by aligning
    /// known segments to the original (earliest consistent alignment).
    pub fn from_pair_line(line: &str) -> Result<Self> {
        let (t, o) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("expected 'template<TAB>original': '{line}'")))?;
        let template = Template::parse(t)?;
        let original = tokenize(o, false);
        let golden = align(&template, &original).ok_or_else(|| {
            Error::Format(format!("template does not match its original sentence: '{line}'"))
        })?;
        Ok(InfillExample { template, golden, original })
    }

    pub fn to_pair_line(&self) -> String {
        format!("{}\t{}", self.template.render(), self.original.join(" "))
    }

    /// Template with every blank replaced by its golden fill.
    pub fn golden_filled(&self) -> Result<Template> {
        let mut t = self.template.clone();
        for id in self.template.blank_set() {
            let fill = self
                .golden
                .get(&id)
                .ok_or_else(|| Error::Contract(format!("no golden fill for blank {id}")))?;
            t = t.update(id, fill.clone())?;
        }
        Ok(t)
    }

    /// Template as seen when filling `seg_id`: earlier blanks hold golden fills.
    pub fn template_for_blank(&self, seg_id: usize) -> Result<Template> {
        let mut t = self.template.clone();
        for id in self.template.blank_set().into_iter().filter(|&id| id < seg_id) {
            t = t.update(id, self.golden[&id].clone())?;
        }
        Ok(t)
    }

    pub fn round_trips(&self) -> bool {
        self.golden_filled().and_then(|t| t.reconstruct()).map(|r| r == self.original).unwrap_or(false)
    }

    pub fn masked_token_count(&self) -> usize {
        self.golden.values().map(Vec::len).sum()
    }
}

fn align(template: &Template, original: &[String]) -> Option<BTreeMap<usize, Vec<String>>> {
    fn go(
        segs: &[Segment],
        i: usize,
        pos: usize,
        original: &[String],
        out: &mut Vec<(usize, usize, usize)>,
        dead: &mut HashSet<(usize, usize)>,
    ) -> bool {
        if i == segs.len() {
            return pos == original.len();
        }
        if dead.contains(&(i, pos)) {
            return false;
        }
        let s = &segs[i];
        let ok = match s.kind {
            SegmentKind::Known | SegmentKind::Filled => {
                let end = pos + s.tokens.len();
                end <= original.len()
                    && original[pos..end] == s.tokens[..]
                    && go(segs, i + 1, end, original, out, dead)
            }
            SegmentKind::Blank => (pos..=original.len()).any(|end| {
                out.push((s.seg_id, pos, end));
                if go(segs, i + 1, end, original, out, dead) {
                    true
                } else {
                    out.pop();
                    false
                }
            }),
        };
        if !ok {
            dead.insert((i, pos));
        }
        ok
    }
    let mut out = Vec::new();
    let mut dead = HashSet::new();
    if go(template.segments(), 0, 0, original, &mut out, &mut dead) {
        Some(out.into_iter().map(|(id, a, b)| (id, original[a..b].to_vec())).collect())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, false)
    }

    #[test]
    fn two_blank_template_has_four_segments() {
        let t = Template::parse("__m__ have a __m__ , please .").unwrap();
        assert_eq!(t.segments().len(), 4);
        assert_eq!(t.blank_set(), vec![1, 3]);
        assert_eq!(t.segment(2).unwrap().tokens, toks("have a"));
        assert_eq!(t.segment(4).unwrap().tokens, toks(", please ."));
    }

    #[test]
    fn degenerate_templates() {
        let t = Template::parse("hello world").unwrap();
        assert_eq!(t.segments().len(), 1);
        assert!(t.blank_set().is_empty());
        let t = Template::parse("__m__").unwrap();
        assert_eq!(t.segments().len(), 1);
        assert_eq!(t.blank_set(), vec![1]);
    }

    #[test]
    fn adjacent_markers_are_rejected() {
        assert!(matches!(Template::parse("a __m__ __m__ b"), Err(Error::Format(_))));
        assert!(matches!(Template::parse("a x__m__ b"), Err(Error::Format(_))));
    }

    #[test]
    fn update_and_reconstruct_two_blanks() {
        let t = Template::parse("__m__ have a __m__ , please .").unwrap();
        let t1 = t.update(1, toks("can i")).unwrap();
        assert_eq!(t1.blank_set(), vec![3]);
        assert_eq!(t1.segment(1).unwrap().kind, SegmentKind::Filled);
        assert_eq!(t1.segment(1).unwrap().tokens, toks("can i"));
        assert_eq!(&t1.segments()[1..], &t.segments()[1..]);
        assert!(t1.reconstruct().is_err());
        let t2 = t1.update(3, toks("beef burger with cheddar")).unwrap();
        assert!(t2.is_complete());
        assert_eq!(t2.reconstruct().unwrap().join(" "), "can i have a beef burger with cheddar , please .");
    }

    #[test]
    fn update_errors() {
        let t = Template::parse("__m__ have a __m__ , please .").unwrap();
        assert!(matches!(t.update(2, toks("x")), Err(Error::Contract(_))));
        assert!(matches!(t.update(9, toks("x")), Err(Error::Contract(_))));
        assert!(matches!(t.update(1, toks("<eob>")), Err(Error::Contract(_))));
        let filled = t.update(1, vec![]).unwrap();
        assert!(matches!(filled.update(1, toks("x")), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_fill_consumes_blank() {
        let t = Template::parse("a __m__ b").unwrap();
        let f = t.update(2, vec![]).unwrap();
        assert!(f.is_complete());
        assert_eq!(f.reconstruct().unwrap(), toks("a b"));
    }

    #[test]
    fn from_spans_builds_alternating_segments() {
        let s = toks("the old woman went out , but saw no one");
        let ex = InfillExample::from_spans(&s, &[(0, 1), (4, 1), (8, 1)]).unwrap();
        assert_eq!(ex.template.render(), "__m__ old woman went __m__ , but saw __m__ one");
        assert_eq!(ex.golden[&1], toks("the"));
        assert_eq!(ex.golden[&3], toks("out"));
        assert!(ex.round_trips());
        // empty mask between tokens
        let ex = InfillExample::from_spans(&s, &[(3, 0)]).unwrap();
        assert_eq!(ex.template.render(), "the old woman __m__ went out , but saw no one");
        assert_eq!(ex.golden[&2], Vec::<String>::new());
        assert!(ex.round_trips());
        // adjacent spans are rejected
        assert!(InfillExample::from_spans(&s, &[(0, 2), (2, 1)]).is_err());
        assert!(InfillExample::from_spans(&s, &[(2, 0), (2, 1)]).is_err());
    }

    #[test]
    fn pair_line_round_trip() {
        let s = toks("i live right down the street and i was craving some good chinese food .");
        let ex = InfillExample::from_spans(&s, &[(2, 4), (9, 3)]).unwrap();
        let line = ex.to_pair_line();
        assert_eq!(line.split('\t').next().unwrap(), "i live __m__ and i was __m__ chinese food .");
        let back = InfillExample::from_pair_line(&line).unwrap();
        assert_eq!(back, ex);
        assert!(InfillExample::from_pair_line("a __m__ b\tc d e").is_err());
        assert!(InfillExample::from_pair_line("no tab here").is_err());
    }

    #[test]
    fn alignment_backtracks_over_repeated_tokens() {
        let ex = InfillExample::from_pair_line("__m__ a b\ta a b").unwrap();
        assert_eq!(ex.golden[&1], toks("a"));
        assert!(ex.round_trips());
    }

    #[test]
    fn template_for_blank_uses_golden_prefix() {
        let ex = InfillExample::from_pair_line("__m__ have a __m__ , please .\tcan i have a beef burger , please .")
            .unwrap();
        let t3 = ex.template_for_blank(3).unwrap();
        assert_eq!(t3.blank_set(), vec![3]);
        assert_eq!(t3.segment(1).unwrap().tokens, toks("can i"));
        let t1 = ex.template_for_blank(1).unwrap();
        assert_eq!(t1, ex.template);
    }
}
