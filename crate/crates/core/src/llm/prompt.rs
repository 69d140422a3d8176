//! Chat prompt rendering with a single `<bev>` insertion slot.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use super::tokenizer::{
    Tokenizer, BEGIN_OF_TEXT, BEV, END_HEADER, END_OF_MESSAGE, START_HEADER,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(Error::Template(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    /// Parses the role name; unknown roles are template errors.
    pub fn parse(role: &str, content: impl Into<String>) -> Result<Self> {
        Ok(Self::new(role.parse()?, content))
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssembly {
    pub messages: Vec<ChatMessage>,
    pub rendered: String,
    pub ids: Vec<usize>,
    /// Position of the `<bev>` token (always one token wide).
    pub bev_slot: Range<usize>,
    /// First position after the trailing assistant header.
    pub generation_start: usize,
    /// Assistant response appended for teacher forcing, including its
    /// end-of-message token.
    pub response: Option<Range<usize>>,
}

impl PromptAssembly {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends the tokenized ground-truth `response` and an end-of-message
    /// token. `generation_start` is left untouched.
    pub fn with_response(&self, tokenizer: &Tokenizer, response: &str) -> Result<Self> {
        if self.response.is_some() {
            return Err(Error::Template("prompt already carries a response".into()));
        }
        let body = tokenizer.encode(response);
        if body.contains(&tokenizer.special().bev) {
            return Err(Error::Template("`<bev>` inside the assistant response".into()));
        }
        let mut out = self.clone();
        out.ids.extend(body);
        out.ids.push(tokenizer.special().end_of_message);
        out.rendered.push_str(response);
        out.rendered.push_str(END_OF_MESSAGE);
        out.response = Some(self.ids.len()..out.ids.len());
        Ok(out)
    }

    /// Next-token targets and the mask selecting positions whose target lies
    /// in the response: position `t` predicts `ids[t + 1]`.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.ids.len();
        let mut targets = vec![0; n];
        let mut active = vec![false; n];
        if let Some(resp) = &self.response {
            for t in 0..n.saturating_sub(1) {
                targets[t] = self.ids[t + 1];
                active[t] = resp.contains(&(t + 1));
            }
        }
        (targets, active)
    }

    /// Maps a token position to its index after the slot is replaced by
    /// `num_queries` rows.
    pub fn spliced_position(&self, pos: usize, num_queries: usize) -> usize {
        if pos < self.bev_slot.start {
            pos
        } else {
            pos - 1 + num_queries
        }
    }
}

fn render_header(out: &mut String, role: Role) {
    out.push_str(START_HEADER);
    out.push_str(role.as_str());
    out.push_str(END_HEADER);
    out.push_str("\n\n");
}

/// Renders `messages` in the Llama-3 chat layout and tokenizes the result.
pub fn build_prompt(messages: &[ChatMessage], tokenizer: &Tokenizer) -> Result<PromptAssembly> {
    if messages.is_empty() {
        return Err(Error::Template("no messages".into()));
    }
    let mut placeholders = 0;
    for m in messages {
        let n = m.content.matches(BEV).count();
        if n > 0 && m.role != Role::User {
            return Err(Error::Template(format!("`<bev>` in a {} message", m.role)));
        }
        placeholders += n;
    }
    if placeholders != 1 {
        return Err(Error::Template(format!(
            "expected exactly one `<bev>` placeholder, found {placeholders}"
        )));
    }

    let special = tokenizer.special();
    let mut rendered = String::from(BEGIN_OF_TEXT);
    let mut ids = vec![special.begin_of_text];
    for m in messages {
        render_header(&mut rendered, m.role);
        rendered.push_str(&m.content);
        rendered.push_str(END_OF_MESSAGE);
        ids.push(special.start_header);
        ids.extend(tokenizer.encode(m.role.as_str()));
        ids.push(special.end_header);
        ids.extend(tokenizer.encode(&m.content));
        ids.push(special.end_of_message);
    }
    render_header(&mut rendered, Role::Assistant);
    ids.push(special.start_header);
    ids.extend(tokenizer.encode(Role::Assistant.as_str()));
    ids.push(special.end_header);

    if tokenizer.encode(&rendered) != ids {
        return Err(Error::Internal(
            "rendered prompt does not re-tokenize to the assembled ids".into(),
        ));
    }
    let slot = ids
        .iter()
        .position(|&t| t == special.bev)
        .ok_or_else(|| Error::Internal("`<bev>` vanished during tokenization".into()))?;
    let generation_start = ids.len();
    Ok(PromptAssembly {
        messages: messages.to_vec(),
        rendered,
        ids,
        bev_slot: slot..slot + 1,
        generation_start,
        response: None,
    })
}

/// Single-turn captioning prompt asking for `view_phrase`.
pub fn caption_prompt(tokenizer: &Tokenizer, view_phrase: &str) -> Result<PromptAssembly> {
    build_prompt(
        &[ChatMessage::user(format!("Describe the {view_phrase}. {BEV}"))],
        tokenizer,
    )
}
