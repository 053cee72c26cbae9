//! Attention masks: the joint JOLT mask (local bidirectional schema
//! attention, marker rules, selective query attention) and the plain causal
//! mask, with ASCII/SVG/PPM renderers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::tokenizer::SegmentMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(&'static str),
}

/// Dense `n × n` visibility matrix; `visible(i, j)` means row `i` may attend
/// to column `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    cells: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize) -> Self {
        AttentionMask { n, cells: vec![false; n * n] }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = AttentionMask::new(n);
        for i in 0..n {
            for j in 0..n {
                m.cells[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.cells[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.cells[i * self.n..(i + 1) * self.n]
    }

    pub fn count_visible(&self) -> usize {
        self.cells.iter().filter(|&&v| v).count()
    }

    /// Leading `k × k` block.
    pub fn truncate(&self, k: usize) -> AttentionMask {
        AttentionMask::from_fn(k, |i, j| self.visible(i, j))
    }
}

/// `visible(i, j) = j ≤ i`.
pub fn build_causal_mask(n: usize) -> AttentionMask {
    AttentionMask::from_fn(n, |i, j| j <= i)
}

/// Checks that prefix, schema and query ranges partition `0..len` and that
/// markers and GT/noisy positions lie inside the schema.
pub fn validate_segmentation(seg: &SegmentMap) -> Result<(), MaskError> {
    if seg.prefix.start != 0
        || seg.prefix.end != seg.schema.start
        || seg.schema.end != seg.query.start
        || seg.query.end != seg.len
        || seg.prefix.start > seg.prefix.end
        || seg.schema.start > seg.schema.end
        || seg.query.start > seg.query.end
    {
        return Err(MaskError::InvalidSegmentation("regions do not partition the sequence"));
    }
    let in_schema = |p: &usize| seg.schema.range().contains(p);
    if !seg.markers.iter().all(in_schema) {
        return Err(MaskError::InvalidSegmentation("marker outside the schema"));
    }
    if !seg.gt_schema.iter().all(in_schema) || !seg.noisy_schema.iter().all(in_schema) {
        return Err(MaskError::InvalidSegmentation("GT or noisy position outside the schema"));
    }
    Ok(())
}

/// Builds the joint training mask.
///
/// * prefix row `i`: prefix positions `j ≤ i`
/// * schema row (non-marker): prefix ∪ schema, minus markers
/// * marker row: prefix ∪ schema
/// * query row `i`: prefix ∪ GT ∪ noisy ∪ query positions `j ≤ i`, minus markers
pub fn build_joint_mask(seg: &SegmentMap) -> Result<AttentionMask, MaskError> {
    validate_segmentation(seg)?;
    let n = seg.len;
    let mut is_marker = vec![false; n];
    for &m in &seg.markers {
        is_marker[m] = true;
    }
    let mut selected = vec![false; n];
    for &p in seg.gt_schema.iter().chain(&seg.noisy_schema) {
        selected[p] = true;
    }
    let ctx_end = seg.schema.end;
    let mut mask = AttentionMask::new(n);
    for i in seg.prefix.range() {
        for j in 0..=i {
            mask.set(i, j, true);
        }
    }
    for i in seg.schema.range() {
        let marker_row = is_marker[i];
        for j in 0..ctx_end {
            mask.set(i, j, marker_row || !is_marker[j]);
        }
    }
    for i in seg.query.range() {
        for j in seg.prefix.range() {
            mask.set(i, j, true);
        }
        for j in seg.schema.range() {
            mask.set(i, j, selected[j] && !is_marker[j]);
        }
        for j in seg.query.start..=i {
            mask.set(i, j, true);
        }
    }
    Ok(mask)
}

fn region_tag(seg: &SegmentMap, p: usize) -> char {
    if seg.markers.contains(&p) {
        'M'
    } else if seg.prefix.range().contains(&p) {
        'P'
    } else if seg.schema.range().contains(&p) {
        if seg.gt_schema.contains(&p) {
            'G'
        } else if seg.noisy_schema.contains(&p) {
            'N'
        } else {
            'S'
        }
    } else {
        'Q'
    }
}

/// Text grid, one line per attending row. Column 0 is the row's region tag
/// (P prefix, S schema, G ground-truth schema, N noisy schema, M marker,
/// Q query), followed by `#` for visible and `.` for masked cells. When
/// `labels` are given the token text is appended to each row.
pub fn render_ascii(mask: &AttentionMask, seg: Option<&SegmentMap>, labels: Option<&[String]>) -> String {
    let n = mask.n();
    let mut out = String::new();
    if let Some(seg) = seg {
        out.push_str("  ");
        for j in 0..n {
            out.push(region_tag(seg, j));
        }
        out.push('\n');
    }
    for i in 0..n {
        if let Some(seg) = seg {
            out.push(region_tag(seg, i));
            out.push(' ');
        }
        for &v in mask.row(i) {
            out.push(if v { '#' } else { '.' });
        }
        if let Some(t) = labels.and_then(|l| l.get(i)) {
            let _ = write!(out, "  {t}");
        }
        out.push('\n');
    }
    out
}

/// Monochrome SVG, `cell` pixels per entry; thin lines separate the prefix,
/// schema and query blocks.
pub fn render_svg(mask: &AttentionMask, seg: Option<&SegmentMap>, labels: Option<&[String]>, cell: usize) -> String {
    let n = mask.n();
    let margin = if labels.is_some() { 12 * cell } else { 0 };
    let size = n * cell + margin;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(out, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    for i in 0..n {
        for j in 0..n {
            if mask.visible(i, j) {
                let _ = writeln!(
                    out,
                    r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="black"/>"#,
                    margin + j * cell,
                    margin + i * cell
                );
            }
        }
    }
    if let Some(seg) = seg {
        for b in [seg.schema.start, seg.query.start] {
            if b == 0 || b == n {
                continue;
            }
            let p = margin + b * cell;
            let _ = writeln!(out, r##"<line x1="{p}" y1="{margin}" x2="{p}" y2="{size}" stroke="#888" stroke-width="1"/>"##);
            let _ = writeln!(out, r##"<line x1="{margin}" y1="{p}" x2="{size}" y2="{p}" stroke="#888" stroke-width="1"/>"##);
        }
    }
    if let Some(labels) = labels {
        for (i, t) in labels.iter().enumerate().take(n) {
            let t = xml_escape(t);
            let c = margin + i * cell + cell * 3 / 4;
            let _ = writeln!(out, r#"<text x="{}" y="{c}" font-size="{cell}" text-anchor="end">{t}</text>"#, margin - 2);
            let _ = writeln!(
                out,
                r#"<text x="{c}" y="{}" font-size="{cell}" transform="rotate(-90 {c} {})">{t}</text>"#,
                margin - 2,
                margin - 2
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Binary PPM (P6): black visible cells on white, `scale` pixels per cell.
pub fn render_ppm(mask: &AttentionMask, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let side = mask.n() * scale;
    let mut out = alloc::format!("P6\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = if mask.visible(y / scale, x / scale) { 0 } else { 255 };
            out.extend_from_slice(&[v, v, v]);
        }
    }
    out
}
