//! Line-oriented tokenizer shared by the key-value text formats.

/// Iterates non-empty lines as (1-based line number, whitespace tokens), with
/// one line of lookahead.
pub(crate) struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    lookahead: Option<(usize, Vec<&'a str>)>,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        LineReader {
            lines: text.lines().enumerate(),
            lookahead: None,
        }
    }

    pub(crate) fn next(&mut self) -> Option<(usize, Vec<&'a str>)> {
        if let Some(item) = self.lookahead.take() {
            return Some(item);
        }
        for (i, line) in self.lines.by_ref() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if !toks.is_empty() {
                return Some((i + 1, toks));
            }
        }
        None
    }

    pub(crate) fn peek(&mut self) -> Option<&(usize, Vec<&'a str>)> {
        if self.lookahead.is_none() {
            self.lookahead = self.next();
        }
        self.lookahead.as_ref()
    }
}
