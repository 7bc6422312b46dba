use alloc::string::String;
use alloc::vec::Vec;

use super::{ActionId, EnvError, EnvKind, EnvState, Environment, Payload, StateId};

/// Prepend/append sequence construction over a finite alphabet.
///
/// Each step adds one token at the left or right end; strings of length `L`
/// are terminal. Action `t` prepends token `t`, action `|Σ| + t` appends it.
/// From the empty string both coincide and only the prepend action exists.
///
/// Ids: strings are grouped by length, then ranked in base `|Σ|` with the
/// first token most significant.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "SeqShape", into = "SeqShape"))]
pub struct SequenceEnv {
    alphabet: Vec<char>,
    max_len: usize,
    /// `offsets[k]` is the id of the first string of length `k`.
    offsets: Vec<u64>,
}

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct SeqShape {
    alphabet: String,
    length: usize,
}

impl TryFrom<SeqShape> for SequenceEnv {
    type Error = EnvError;
    fn try_from(shape: SeqShape) -> Result<Self, EnvError> {
        SequenceEnv::new(&shape.alphabet, shape.length)
    }
}

impl From<SequenceEnv> for SeqShape {
    fn from(env: SequenceEnv) -> Self {
        SeqShape { alphabet: env.alphabet.iter().collect(), length: env.max_len }
    }
}

impl SequenceEnv {
    pub fn new(alphabet: &str, max_len: usize) -> Result<Self, EnvError> {
        let symbols: Vec<char> = alphabet.chars().collect();
        if symbols.is_empty() || symbols.len() > 255 {
            return Err(EnvError::Invalid("alphabet must have between 1 and 255 symbols"));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(EnvError::Invalid("alphabet symbols must be distinct"));
            }
            if c.is_whitespace() || *c == '#' {
                return Err(EnvError::Invalid("alphabet symbols must be printable and not '#'"));
            }
        }
        if max_len == 0 {
            return Err(EnvError::Invalid("sequence length must be at least 1"));
        }
        let base = symbols.len() as u64;
        let mut offsets = Vec::with_capacity(max_len + 2);
        let mut total = 0u64;
        let mut layer = 1u64;
        offsets.push(0);
        for _ in 0..=max_len {
            total = total.checked_add(layer).ok_or(EnvError::Invalid("sequence space too large"))?;
            offsets.push(total);
            layer = layer.checked_mul(base).unwrap_or(u64::MAX);
        }
        Ok(SequenceEnv { alphabet: symbols, max_len, offsets })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, tokens: &[u8]) -> StateId {
        let base = self.alphabet.len() as u64;
        let rank = tokens.iter().fold(0u64, |acc, &t| acc * base + u64::from(t));
        StateId(self.offsets[tokens.len()] + rank)
    }

    fn make(&self, tokens: Vec<u8>) -> EnvState {
        EnvState { id: self.encode(&tokens), payload: Payload::Seq { tokens } }
    }

    /// Builds a state from token indices.
    pub fn from_tokens(&self, tokens: &[u8]) -> Result<EnvState, EnvError> {
        if tokens.len() > self.max_len || tokens.iter().any(|&t| usize::from(t) >= self.alphabet.len()) {
            return Err(EnvError::ForeignState);
        }
        Ok(self.make(tokens.to_vec()))
    }

    fn tokens<'a>(&self, state: &'a EnvState) -> Result<&'a [u8], EnvError> {
        match &state.payload {
            Payload::Seq { tokens } if tokens.len() <= self.max_len => Ok(tokens),
            _ => Err(EnvError::ForeignState),
        }
    }
}

impl Environment for SequenceEnv {
    fn as_sequence(&self) -> Option<&SequenceEnv> {
        Some(self)
    }

    fn kind(&self) -> EnvKind {
        EnvKind::Sequence
    }

    fn num_states(&self) -> u64 {
        self.offsets[self.max_len + 1]
    }

    fn num_terminals(&self) -> u64 {
        self.offsets[self.max_len + 1] - self.offsets[self.max_len]
    }

    fn initial(&self) -> EnvState {
        self.make(Vec::new())
    }

    fn state(&self, id: StateId) -> Result<EnvState, EnvError> {
        if id.0 >= self.num_states() {
            return Err(EnvError::UnknownId(id.0));
        }
        let len = self.offsets.partition_point(|&o| o <= id.0) - 1;
        let base = self.alphabet.len() as u64;
        let mut rank = id.0 - self.offsets[len];
        let mut tokens = alloc::vec![0u8; len];
        for slot in tokens.iter_mut().rev() {
            *slot = (rank % base) as u8;
            rank /= base;
        }
        Ok(EnvState { id, payload: Payload::Seq { tokens } })
    }

    fn is_terminal(&self, state: &EnvState) -> bool {
        matches!(&state.payload, Payload::Seq { tokens } if tokens.len() == self.max_len)
    }

    fn children(&self, state: &EnvState) -> Result<Vec<(ActionId, EnvState)>, EnvError> {
        let tokens = self.tokens(state)?;
        if tokens.len() == self.max_len {
            return Err(EnvError::Contract("terminal states have no children"));
        }
        let k = self.alphabet.len();
        let mut out: Vec<(ActionId, EnvState)> = Vec::with_capacity(2 * k);
        for t in 0..k as u8 {
            let mut next = Vec::with_capacity(tokens.len() + 1);
            next.push(t);
            next.extend_from_slice(tokens);
            out.push((ActionId(u32::from(t)), self.make(next)));
        }
        for t in 0..k as u8 {
            let mut next = tokens.to_vec();
            next.push(t);
            let child = self.make(next);
            // Appending t equals prepending t only when the string is t^n.
            if !out.iter().any(|(_, c)| c.id == child.id) {
                out.push((ActionId((k + usize::from(t)) as u32), child));
            }
        }
        Ok(out)
    }

    fn parents(&self, state: &EnvState) -> Result<Vec<(ActionId, EnvState)>, EnvError> {
        let tokens = self.tokens(state)?;
        let n = tokens.len();
        if n == 0 {
            return Err(EnvError::Contract("the initial state has no parents"));
        }
        let k = self.alphabet.len();
        let left = self.make(tokens[1..].to_vec());
        let mut out = alloc::vec![(ActionId(u32::from(tokens[0])), left)];
        if n > 1 {
            let right = self.make(tokens[..n - 1].to_vec());
            if right.id != out[0].1.id {
                out.push((ActionId((k + usize::from(tokens[n - 1])) as u32), right));
            }
        }
        Ok(out)
    }

    fn feature_dim(&self) -> usize {
        self.max_len * (self.alphabet.len() + 1)
    }

    fn active_features(&self, state: &EnvState, out: &mut Vec<usize>) {
        if let Payload::Seq { tokens } = &state.payload {
            let width = self.alphabet.len() + 1;
            let pad = self.alphabet.len();
            out.extend((0..self.max_len).map(|p| {
                p * width + tokens.get(p).map_or(pad, |&t| usize::from(t))
            }));
        }
    }

    fn terminal_index(&self, state: &EnvState) -> Option<u64> {
        self.is_terminal(state).then(|| state.id.0 - self.offsets[self.max_len])
    }

    fn terminal_at(&self, index: u64) -> Result<EnvState, EnvError> {
        if index >= self.num_terminals() {
            return Err(EnvError::UnknownId(index));
        }
        self.state(StateId(self.offsets[self.max_len] + index))
    }

    fn format_state(&self, state: &EnvState) -> String {
        match &state.payload {
            Payload::Seq { tokens } => tokens.iter().map(|&t| self.alphabet[usize::from(t)]).collect(),
            Payload::Grid { .. } => String::new(),
        }
    }

    fn parse_terminal(&self, text: &str) -> Result<EnvState, EnvError> {
        let tokens = text
            .chars()
            .map(|c| {
                self.alphabet
                    .iter()
                    .position(|&a| a == c)
                    .map(|p| p as u8)
                    .ok_or_else(|| EnvError::Parse { text: text.into(), reason: "symbol not in alphabet" })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if tokens.len() != self.max_len {
            return Err(EnvError::Parse { text: text.into(), reason: "terminal strings must have the full length" });
        }
        Ok(self.make(tokens))
    }

    fn max_trajectory_len(&self) -> usize {
        self.max_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn strings(env: &SequenceEnv, items: &[(ActionId, EnvState)]) -> Vec<String> {
        items.iter().map(|(_, s)| env.format_state(s)).collect()
    }

    fn partial(env: &SequenceEnv, text: &str) -> EnvState {
        let tokens: Vec<u8> =
            text.chars().map(|c| env.alphabet().iter().position(|&a| a == c).unwrap() as u8).collect();
        env.from_tokens(&tokens).unwrap()
    }

    #[test]
    fn prepend_and_append_children() {
        let env = SequenceEnv::new("AC", 4).unwrap();
        let kids = env.children(&partial(&env, "AC")).unwrap();
        assert_eq!(strings(&env, &kids), vec!["AAC", "CAC", "ACA", "ACC"]);
        let actions: Vec<u32> = kids.iter().map(|(a, _)| a.0).collect();
        assert_eq!(actions, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_state_has_one_child_per_token() {
        let env = SequenceEnv::new("AC", 4).unwrap();
        let kids = env.children(&env.initial()).unwrap();
        assert_eq!(strings(&env, &kids), vec!["A", "C"]);
    }

    #[test]
    fn repeated_string_deduplicates() {
        let env = SequenceEnv::new("AC", 4).unwrap();
        let kids = env.children(&partial(&env, "A")).unwrap();
        assert_eq!(strings(&env, &kids), vec!["AA", "CA", "AC"]);
        let ps = env.parents(&partial(&env, "AAA")).unwrap();
        assert_eq!(strings(&env, &ps), vec!["AA"]);
    }

    #[test]
    fn parents_remove_either_end() {
        let env = SequenceEnv::new("AC", 4).unwrap();
        let ps = env.parents(&partial(&env, "ACA")).unwrap();
        assert_eq!(strings(&env, &ps), vec!["CA", "AC"]);
        let ps = env.parents(&partial(&env, "A")).unwrap();
        assert_eq!(ps, vec![(ActionId(0), env.initial())]);
        assert!(matches!(env.parents(&env.initial()), Err(EnvError::Contract(_))));
        let full = env.parse_terminal("ACCA").unwrap();
        assert!(matches!(env.children(&full), Err(EnvError::Contract(_))));
    }

    #[test]
    fn ids_are_length_then_lexicographic() {
        let env = SequenceEnv::new("AC", 2).unwrap();
        let all: Vec<String> = (0..env.num_states())
            .map(|i| env.format_state(&env.state(StateId(i)).unwrap()))
            .collect();
        assert_eq!(all, vec!["", "A", "C", "AA", "AC", "CA", "CC"]);
        assert_eq!(env.terminal_index(&env.parse_terminal("CA").unwrap()), Some(2));
    }

    #[test]
    fn rejects_bad_alphabets_and_strings() {
        assert!(SequenceEnv::new("", 3).is_err());
        assert!(SequenceEnv::new("AA", 3).is_err());
        assert!(SequenceEnv::new("A C", 3).is_err());
        assert!(SequenceEnv::new("AC", 0).is_err());
        let env = SequenceEnv::new("ACGT", 3).unwrap();
        assert!(env.parse_terminal("ACX").is_err());
        assert!(env.parse_terminal("AC").is_err());
        assert_eq!(env.format_state(&env.parse_terminal("GTA").unwrap()), "GTA".to_string());
    }

    #[test]
    fn features_pad_short_strings() {
        let env = SequenceEnv::new("AC", 3).unwrap();
        let mut f = Vec::new();
        env.active_features(&partial(&env, "C"), &mut f);
        assert_eq!(f, vec![1, 5, 8]);
    }
}
