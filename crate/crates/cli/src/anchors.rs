//! Anchor files: one prompt per line, tokens separated by spaces. Blank
//! lines and lines starting with `#` are skipped.

use std::path::Path;

use erasure_core::capture::{AnchorRole, AnchorSet};
use erasure_core::engine::{Prompt, Vocabulary};
use erasure_core::{Error, Result};

pub fn parse_anchor_text(vocab: &Vocabulary, text: &str) -> Result<Vec<Prompt>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            vocab.parse_prompt(l.trim()).map_err(|e| match e {
                Error::VocabError(msg) => Error::VocabError(format!("line {}: {msg}", i + 1)),
                other => other,
            })
        })
        .collect()
}

pub fn load_anchor_file(vocab: &Vocabulary, path: &Path, role: AnchorRole) -> Result<AnchorSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let prompts = parse_anchor_text(vocab, &text)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "anchors".into());
    AnchorSet::new(name, role, prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let v = Vocabulary::builtin();
        let p = parse_anchor_text(&v, "# forget set\n\na photo of pikachu\n  pikachu  \n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(v.render(&p[1]), "pikachu");
    }

    #[test]
    fn unknown_word_reports_line() {
        let v = Vocabulary::builtin();
        let err = parse_anchor_text(&v, "pikachu\na photo of gandalf\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
