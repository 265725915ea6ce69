//! Command templates: `{name}` substitutes a dimension or setting value,
//! `{{` is a literal `{`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandTemplate {
    source: String,
    pieces: Vec<Piece>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unclosed `{{` at byte {0}")]
    Unclosed(usize),
    #[error("empty placeholder `{{}}` at byte {0}")]
    Empty(usize),
    #[error("placeholder at byte {0} contains `{{`")]
    Nested(usize),
}

impl CommandTemplate {
    pub fn parse(source: &str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut literal = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((at, c)) = chars.next() {
            if c != '{' {
                literal.push(c);
                continue;
            }
            if matches!(chars.peek(), Some((_, '{'))) {
                chars.next();
                literal.push('{');
                continue;
            }
            let mut name = String::new();
            loop {
                match chars.next() {
                    None => return Err(TemplateError::Unclosed(at)),
                    Some((_, '}')) => break,
                    Some((_, '{')) => return Err(TemplateError::Nested(at)),
                    Some((_, c)) => name.push(c),
                }
            }
            if name.is_empty() {
                return Err(TemplateError::Empty(at));
            }
            if !literal.is_empty() {
                pieces.push(Piece::Literal(std::mem::take(&mut literal)));
            }
            pieces.push(Piece::Placeholder(name));
        }
        if !literal.is_empty() {
            pieces.push(Piece::Literal(literal));
        }
        Ok(CommandTemplate {
            source: source.to_owned(),
            pieces,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Placeholder(name) => Some(name.as_str()),
            Piece::Literal(_) => None,
        })
    }

    /// Substitutes every placeholder. Returns the first name `lookup`
    /// cannot resolve as the error.
    pub fn render<F>(&self, mut lookup: F) -> Result<String, &str>
    where
        F: FnMut(&str) -> Option<String>,
    {
        let mut out = String::with_capacity(self.source.len());
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(name) => out.push_str(&lookup(name).ok_or(name.as_str())?),
            }
        }
        Ok(out)
    }
}
