//! Input layout `sys | img | specials | txt` and the per-task key views.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::encoders::Task;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Sys,
    Img,
    G,
    D,
    S,
    Txt,
}

impl Segment {
    pub fn special(task: Task) -> Segment {
        match task {
            Task::Gen => Segment::G,
            Task::Depth => Segment::D,
            Task::Seg => Segment::S,
        }
    }

    pub fn task(self) -> Option<Task> {
        match self {
            Segment::G => Some(Task::Gen),
            Segment::D => Some(Task::Depth),
            Segment::S => Some(Task::Seg),
            _ => None,
        }
    }
}

/// Permutation of the three special-token blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenOrder([Task; 3]);

impl TokenOrder {
    pub fn new(order: [Task; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for t in order {
            if std::mem::replace(&mut seen[t.index()], true) {
                return Err(Error::invalid(format!("token order {order:?} repeats {t}")));
            }
        }
        Ok(TokenOrder(order))
    }

    pub fn tasks(&self) -> [Task; 3] {
        self.0
    }

    /// All six permutations, default first.
    pub fn all() -> Vec<TokenOrder> {
        ["gds", "gsd", "dgs", "dsg", "sgd", "sdg"]
            .iter()
            .map(|s| s.parse().expect("valid permutation"))
            .collect()
    }
}

impl Default for TokenOrder {
    fn default() -> Self {
        TokenOrder([Task::Gen, Task::Depth, Task::Seg])
    }
}

impl FromStr for TokenOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 3 {
            return Err(Error::invalid(format!(
                "token order `{s}` must be a permutation of \"gds\""
            )));
        }
        let mut order = [Task::Gen; 3];
        for (slot, c) in order.iter_mut().zip(chars) {
            *slot = match c {
                'g' => Task::Gen,
                'd' => Task::Depth,
                's' => Task::Seg,
                _ => {
                    return Err(Error::invalid(format!(
                        "token order `{s}` must be a permutation of \"gds\""
                    )))
                }
            };
        }
        TokenOrder::new(order).map_err(|_| {
            Error::invalid(format!("token order `{s}` must be a permutation of \"gds\""))
        })
    }
}

impl fmt::Display for TokenOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.0 {
            f.write_str(&t.name()[..1])?;
        }
        Ok(())
    }
}

impl Serialize for TokenOrder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenOrder {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which segments a predictor sees as keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyView {
    ImgT,
    SysImgT,
    #[default]
    SysImgTTxt,
}

impl KeyView {
    pub const ALL: [KeyView; 3] = [KeyView::ImgT, KeyView::SysImgT, KeyView::SysImgTTxt];

    /// Segments in sequence order, with `None` standing for the task's own special block.
    fn parts(self) -> &'static [Option<Segment>] {
        match self {
            KeyView::ImgT => &[Some(Segment::Img), None],
            KeyView::SysImgT => &[Some(Segment::Sys), Some(Segment::Img), None],
            KeyView::SysImgTTxt => &[Some(Segment::Sys), Some(Segment::Img), None, Some(Segment::Txt)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub segment: Segment,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Segment map and supervision mask of an assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    spans: Vec<Span>,
    target_mask: Vec<bool>,
    order: TokenOrder,
}

impl Layout {
    /// Spans for the given block lengths. A special block of length 0 is omitted.
    pub fn new(sys: usize, img: usize, special: [usize; 3], txt: usize, order: TokenOrder) -> Result<Self> {
        if sys == 0 || img == 0 || txt == 0 {
            return Err(Error::invalid(format!(
                "sys ({sys}), img ({img}) and txt ({txt}) must be non-empty"
            )));
        }
        let mut spans = Vec::with_capacity(6);
        let mut at = 0;
        let mut push = |segment, n: usize| {
            if n > 0 {
                spans.push(Span {
                    segment,
                    start: at,
                    end: at + n,
                });
                at += n;
            }
        };
        push(Segment::Sys, sys);
        push(Segment::Img, img);
        for t in order.tasks() {
            push(Segment::special(t), special[t.index()]);
        }
        push(Segment::Txt, txt);
        let mut target_mask = vec![false; at];
        target_mask[at - txt..].iter_mut().for_each(|m| *m = true);
        Ok(Layout {
            spans,
            target_mask,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.target_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_mask.is_empty()
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn order(&self) -> TokenOrder {
        self.order
    }

    pub fn span(&self, segment: Segment) -> Option<&Span> {
        self.spans.iter().find(|s| s.segment == segment)
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.target_mask
    }

    /// Removes supervision from the first `k` txt positions (the query).
    pub fn unmask_txt_prefix(&mut self, k: usize) -> Result<()> {
        let txt = self.span(Segment::Txt).expect("txt span always present").range();
        if k >= txt.len() {
            return Err(Error::invalid(format!(
                "cannot unmask {k} of {} txt positions",
                txt.len()
            )));
        }
        self.target_mask[txt.start..txt.start + k]
            .iter_mut()
            .for_each(|m| *m = false);
        Ok(())
    }

    /// Row ranges of the key view for `task` under `policy`, in sequence order.
    ///
    /// The own-special block is skipped when the sequence carries no special
    /// tokens at all; it is an error when other tasks have specials but this
    /// one does not.
    pub fn key_spans(&self, task: Task, policy: KeyView) -> Result<Vec<Range<usize>>> {
        let has_specials = self.spans.iter().any(|s| s.segment.task().is_some());
        let mut out: Vec<Range<usize>> = Vec::new();
        for part in policy.parts() {
            let seg = part.unwrap_or(Segment::special(task));
            match self.span(seg) {
                Some(s) => out.push(s.range()),
                None if part.is_none() && !has_specials => {}
                None => {
                    return Err(Error::MissingSegment {
                        segment: format!("{seg:?}"),
                        policy: format!("{policy:?}"),
                    })
                }
            }
        }
        out.sort_by_key(|r| r.start);
        // Merge touching ranges so graph gathers use fewer slices.
        let mut merged: Vec<Range<usize>> = Vec::with_capacity(out.len());
        for r in out {
            match merged.last_mut() {
                Some(last) if last.end == r.start => last.end = r.end,
                _ => merged.push(r),
            }
        }
        Ok(merged)
    }
}

/// Per-task special blocks indexed by [`Task::index`]; `None` when N_seek = 0.
pub type SpecialBlocks<T> = [Option<T>; 3];

/// Embedded sequence with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Tensor,
    pub layout: Layout,
}

fn rows_dim(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, d] => Ok((*r, *d)),
        s => Err(Error::shape("assemble", format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// Concatenates `sys | img | specials (in order) | txt`.
pub fn assemble(
    sys: &Tensor,
    img: &Tensor,
    special: &SpecialBlocks<Tensor>,
    txt: &Tensor,
    order: TokenOrder,
) -> Result<TokenSequence> {
    let (ns, d) = rows_dim(sys, "sys")?;
    let (ni, di) = rows_dim(img, "img")?;
    let (nt, dt) = rows_dim(txt, "txt")?;
    let mut lens = [0; 3];
    for t in Task::ALL {
        if let Some(b) = &special[t.index()] {
            let (n, db) = rows_dim(b, t.name())?;
            if db != d {
                return Err(Error::shape("assemble", format!("{t} block width {db}, sys width {d}")));
            }
            lens[t.index()] = n;
        }
    }
    if di != d || dt != d {
        return Err(Error::shape(
            "assemble",
            format!("hidden dims differ: sys {d}, img {di}, txt {dt}"),
        ));
    }
    let layout = Layout::new(ns, ni, lens, nt, order)?;
    let mut data = Vec::with_capacity(layout.len() * d);
    data.extend_from_slice(sys.data());
    data.extend_from_slice(img.data());
    for t in order.tasks() {
        if let Some(b) = &special[t.index()] {
            data.extend_from_slice(b.data());
        }
    }
    data.extend_from_slice(txt.data());
    Ok(TokenSequence {
        embeddings: Tensor::new(vec![layout.len(), d], data)?,
        layout,
    })
}

impl TokenSequence {
    /// Rows of one segment, or `None` if it is absent.
    pub fn segment(&self, seg: Segment) -> Option<Tensor> {
        let s = self.layout.span(seg)?;
        Some(gather_rows(&self.embeddings, &[s.range()]).expect("span within sequence"))
    }

    pub fn key_view(&self, task: Task, policy: KeyView) -> Result<Tensor> {
        gather_rows(&self.embeddings, &self.layout.key_spans(task, policy)?)
    }
}

/// Concatenates the selected row ranges of a rank-2 tensor.
pub fn gather_rows(x: &Tensor, ranges: &[Range<usize>]) -> Result<Tensor> {
    let d = x.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for r in ranges {
        if r.end > x.rows() || r.start >= r.end {
            return Err(Error::shape("gather_rows", format!("range {r:?} of {:?}", x.shape())));
        }
        data.extend_from_slice(&x.data()[r.start * d..r.end * d]);
        rows += r.len();
    }
    if rows == 0 {
        return Err(Error::shape("gather_rows", "empty selection"));
    }
    Tensor::new(vec![rows, d], data)
}

/// Graph counterpart of [`assemble`]; returns the sequence node and its layout.
pub fn assemble_vars<T: Real>(
    g: &mut Graph<T>,
    sys: Var,
    img: Var,
    special: &SpecialBlocks<Var>,
    txt: Var,
    order: TokenOrder,
) -> Result<(Var, Layout)> {
    let width = |g: &Graph<T>, v: Var, what: &str| -> Result<(usize, usize)> {
        match g.shape(v) {
            [r, d] => Ok((*r, *d)),
            s => Err(Error::shape("assemble", format!("{what} must be rank 2, got {s:?}"))),
        }
    };
    let (ns, d) = width(g, sys, "sys")?;
    let (ni, di) = width(g, img, "img")?;
    let (nt, dt) = width(g, txt, "txt")?;
    if di != d || dt != d {
        return Err(Error::shape(
            "assemble",
            format!("hidden dims differ: sys {d}, img {di}, txt {dt}"),
        ));
    }
    let mut lens = [0; 3];
    let mut parts = vec![sys, img];
    for t in order.tasks() {
        if let Some(b) = special[t.index()] {
            let (n, db) = width(g, b, t.name())?;
            if db != d {
                return Err(Error::shape("assemble", format!("{t} block width {db}, sys width {d}")));
            }
            lens[t.index()] = n;
            parts.push(b);
        }
    }
    parts.push(txt);
    let layout = Layout::new(ns, ni, lens, nt, order)?;
    Ok((g.concat(&parts, 0)?, layout))
}

/// Graph counterpart of [`gather_rows`].
pub fn gather_rows_var<T: Real>(g: &mut Graph<T>, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
    if ranges.is_empty() {
        return Err(Error::shape("gather_rows", "empty selection"));
    }
    let parts = ranges
        .iter()
        .map(|r| g.slice(x, 0, r.start, r.end))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&parts, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(rows: usize, d: usize, base: f32) -> Tensor {
        Tensor::from_fn(vec![rows, d], |i| base + i as f32).unwrap()
    }

    fn specials(n: usize) -> SpecialBlocks<Tensor> {
        if n == 0 {
            return [None, None, None];
        }
        [Some(block(n, 4, 3000.0)), Some(block(n, 4, 4000.0)), Some(block(n, 4, 5000.0))]
    }

    fn seq(n_seek: usize, order: TokenOrder) -> TokenSequence {
        assemble(
            &block(4, 4, 0.0),
            &block(64, 4, 1000.0),
            &specials(n_seek),
            &block(10, 4, 2000.0),
            order,
        )
        .unwrap()
    }

    #[test]
    fn default_layout() {
        let s = seq(8, TokenOrder::default());
        assert_eq!(s.layout.len(), 102);
        assert_eq!(s.layout.span(Segment::Txt).unwrap().range(), 92..102);
        let labels: Vec<Segment> = s.layout.spans().iter().map(|s| s.segment).collect();
        use Segment::*;
        assert_eq!(labels, vec![Sys, Img, G, D, S, Txt]);
        let mask = s.layout.target_mask();
        assert!(mask[92..].iter().all(|&m| m) && mask[..92].iter().all(|&m| !m));
    }

    #[test]
    fn no_specials() {
        let s = seq(0, TokenOrder::default());
        assert_eq!(s.layout.len(), 78);
        assert!(s.layout.spans().iter().all(|s| s.segment.task().is_none()));
        assert_eq!(s.key_view(Task::Depth, KeyView::SysImgTTxt).unwrap().rows(), 78);
    }

    #[test]
    fn key_view_lengths() {
        let s = seq(8, TokenOrder::default());
        assert_eq!(s.key_view(Task::Depth, KeyView::SysImgTTxt).unwrap().rows(), 86);
        assert_eq!(s.key_view(Task::Depth, KeyView::ImgT).unwrap().rows(), 72);
        assert_eq!(s.key_view(Task::Depth, KeyView::SysImgT).unwrap().rows(), 76);
        let gen = s.layout.key_spans(Task::Gen, KeyView::SysImgTTxt).unwrap();
        for seg in [Segment::D, Segment::S] {
            let r = s.layout.span(seg).unwrap().range();
            assert!(gen.iter().all(|g| g.end <= r.start || g.start >= r.end));
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let r = assemble(
            &block(4, 4, 0.0),
            &block(64, 5, 0.0),
            &specials(0),
            &block(3, 4, 0.0),
            TokenOrder::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn partial_specials_rejected_for_own_view() {
        let sp = [None, Some(block(2, 4, 0.0)), None];
        let s = assemble(&block(1, 4, 0.0), &block(2, 4, 0.0), &sp, &block(1, 4, 0.0), TokenOrder::default())
            .unwrap();
        assert!(s.key_view(Task::Depth, KeyView::ImgT).is_err());
        assert!(s.key_view(Task::Seg, KeyView::ImgT).is_ok());
    }

    #[test]
    fn order_parsing() {
        assert_eq!("gds".parse::<TokenOrder>().unwrap(), TokenOrder::default());
        for bad in ["gg s", "ggs", "gd", "gdx", "gdsg"] {
            assert!(bad.parse::<TokenOrder>().is_err(), "{bad}");
        }
        assert_eq!(TokenOrder::all().len(), 6);
        let json = serde_json::to_string(&"sdg".parse::<TokenOrder>().unwrap()).unwrap();
        assert_eq!(json, "\"sdg\"");
    }

    #[test]
    fn graph_assembly_matches_tensor_assembly() {
        let order: TokenOrder = "sgd".parse().unwrap();
        let want = seq(3, order);
        let mut g = Graph::<f32>::new();
        let sp = specials(3);
        let sv = g.leaf(&block(4, 4, 0.0), false);
        let iv = g.leaf(&block(64, 4, 1000.0), false);
        let tv = g.leaf(&block(10, 4, 2000.0), false);
        let spv = [0, 1, 2].map(|i| Some(g.leaf(sp[i].as_ref().unwrap(), false)));
        let (x, layout) = assemble_vars(&mut g, sv, iv, &spv, tv, order).unwrap();
        assert_eq!(layout, want.layout);
        assert_eq!(g.to_tensor(x), want.embeddings);
        let ks = layout.key_spans(Task::Seg, KeyView::ImgT).unwrap();
        let kv = gather_rows_var(&mut g, x, &ks).unwrap();
        assert_eq!(g.to_tensor(kv), want.key_view(Task::Seg, KeyView::ImgT).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn spans_roundtrip(ns in 1usize..6, ni in 1usize..9, nk in 0usize..4, nt in 1usize..7, oi in 0usize..6) {
            let order = TokenOrder::all()[oi];
            let sp: SpecialBlocks<Tensor> = if nk == 0 { [None, None, None] } else {
                [Some(block(nk, 3, 10.0)), Some(block(nk, 3, 20.0)), Some(block(nk, 3, 30.0))]
            };
            let s = assemble(&block(ns, 3, 0.0), &block(ni, 3, 1.0), &sp, &block(nt, 3, 2.0), order).unwrap();
            let mut prev = 0;
            let mut parts = Vec::new();
            for span in s.layout.spans() {
                proptest::prop_assert_eq!(span.start, prev);
                prev = span.end;
                parts.push(s.segment(span.segment).unwrap());
            }
            proptest::prop_assert_eq!(prev, s.layout.len());
            let rejoined: Vec<f32> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
            proptest::prop_assert_eq!(rejoined, s.embeddings.data().to_vec());
        }
    }
}
