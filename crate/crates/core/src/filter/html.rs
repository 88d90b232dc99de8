//! Forgiving visible-text scanner for HTML.
//!
//! This is not a validator: unterminated tags, comments and raw-text elements
//! simply run to the end of the input. Visible text is character data outside
//! tags, excluding `<script>`/`<style>` bodies and comments. Whitespace runs
//! collapse to one space and the result is trimmed.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HtmlVisibleStats {
    pub visible_chars: usize,
    pub visible_ratio: f64,
}

/// Extract the visible text of `html`.
pub fn visible_text(html: &str) -> String {
    let chars: Vec<char> = html.chars().collect();
    let mut raw = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c != '<' || !starts_markup(&chars, i) {
            raw.push(c);
            i += 1;
            continue;
        }
        if matches_at(&chars, i, "<!--") {
            i = find_from(&chars, i + 4, "-->").map_or(chars.len(), |p| p + 3);
            continue;
        }
        let tag_end = scan_tag(&chars, i);
        let name = tag_name(&chars, i + 1);
        let closing = chars.get(i + 1) == Some(&'/');
        i = tag_end;
        if !closing && (name == "script" || name == "style") {
            let close = format!("</{name}");
            i = match find_from_ci(&chars, i, &close) {
                Some(p) => scan_tag(&chars, p),
                None => chars.len(),
            };
        }
    }
    collapse_whitespace(&raw)
}

pub fn html_visible_stats(html: &str) -> HtmlVisibleStats {
    let total = html.chars().count();
    let visible_chars = visible_text(html).chars().count();
    let visible_ratio = if total == 0 {
        0.0
    } else {
        visible_chars as f64 / total as f64
    };
    HtmlVisibleStats {
        visible_chars,
        visible_ratio,
    }
}

fn starts_markup(chars: &[char], i: usize) -> bool {
    matches!(chars.get(i + 1), Some(c) if c.is_ascii_alphabetic() || matches!(c, '/' | '!' | '?'))
}

fn matches_at(chars: &[char], i: usize, pat: &str) -> bool {
    let mut k = i;
    for p in pat.chars() {
        if chars.get(k) != Some(&p) {
            return false;
        }
        k += 1;
    }
    true
}

fn find_from(chars: &[char], start: usize, pat: &str) -> Option<usize> {
    (start..chars.len()).find(|&i| matches_at(chars, i, pat))
}

fn find_from_ci(chars: &[char], start: usize, pat: &str) -> Option<usize> {
    let pat: Vec<char> = pat.chars().collect();
    (start..chars.len()).find(|&i| {
        pat.iter()
            .enumerate()
            .all(|(k, p)| chars.get(i + k).is_some_and(|c| c.eq_ignore_ascii_case(p)))
    })
}

/// Index one past the `>` closing the tag opened at `start`; quoted attribute
/// values may contain `>`.
fn scan_tag(chars: &[char], start: usize) -> usize {
    let mut quote: Option<char> = None;
    let mut i = start + 1;
    while i < chars.len() {
        let c = chars[i];
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == '>' => return i + 1,
            None => {}
        }
        i += 1;
    }
    chars.len()
}

fn tag_name(chars: &[char], start: usize) -> String {
    chars[start.min(chars.len())..]
        .iter()
        .skip_while(|c| **c == '/')
        .take_while(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paragraph() {
        let s = html_visible_stats("<p>hello</p>");
        assert_eq!(s.visible_chars, 5);
        assert_eq!(s.visible_ratio, 5.0 / 12.0);
    }

    #[test]
    fn script_excluded() {
        let s = html_visible_stats("<script>var x=1;</script>");
        assert_eq!(s.visible_chars, 0);
        assert_eq!(s.visible_ratio, 0.0);
    }

    #[test]
    fn plain_text() {
        let s = html_visible_stats("hello");
        assert_eq!(s.visible_chars, 5);
        assert_eq!(s.visible_ratio, 1.0);
    }

    #[test]
    fn comments_styles_and_whitespace() {
        assert_eq!(
            visible_text("<html>\n  <style>p { x: 1 }</style><!-- hidden --><p>a   b</p>\n<P>c</P></html>"),
            "a b c"
        );
        assert_eq!(visible_text("<SCRIPT type='x'>if (a<b) {}</Script >tail"), "tail");
    }

    #[test]
    fn malformed_markup_is_tolerated() {
        assert_eq!(visible_text("a < b and c <d"), "a < b and c");
        assert_eq!(visible_text("x<!-- never closed"), "x");
        assert_eq!(visible_text("<a href=\"x>y\">link</a>"), "link");
        assert_eq!(visible_text("<script>unterminated"), "");
        assert_eq!(visible_text(""), "");
    }
}
