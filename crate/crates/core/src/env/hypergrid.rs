use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use super::{ActionId, EnvError, EnvKind, EnvState, Environment, Payload, StateId};

/// The `n`-dimensional hypergrid of side `H`.
///
/// Actions `0..n` increment one coordinate; action `n` stops and moves to a
/// terminal copy of the current coordinates. Non-terminal ids are the
/// mixed-radix value `sum_i x_i H^i`; terminal ids follow at offset `H^n`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "GridShape", into = "GridShape"))]
pub struct Hypergrid {
    ndim: usize,
    side: u32,
    cells: u64,
}

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct GridShape {
    ndim: usize,
    side: u32,
}

impl TryFrom<GridShape> for Hypergrid {
    type Error = EnvError;
    fn try_from(shape: GridShape) -> Result<Self, EnvError> {
        Hypergrid::new(shape.ndim, shape.side)
    }
}

impl From<Hypergrid> for GridShape {
    fn from(grid: Hypergrid) -> Self {
        GridShape { ndim: grid.ndim, side: grid.side }
    }
}

impl Hypergrid {
    pub fn new(ndim: usize, side: u32) -> Result<Self, EnvError> {
        if ndim == 0 {
            return Err(EnvError::Invalid("hypergrid needs at least one dimension"));
        }
        if side < 2 {
            return Err(EnvError::Invalid("hypergrid side must be at least 2"));
        }
        let cells = u32::try_from(ndim)
            .ok()
            .and_then(|n| u64::from(side).checked_pow(n))
            .filter(|c| c.checked_mul(2).is_some())
            .ok_or(EnvError::Invalid("hypergrid too large"))?;
        Ok(Hypergrid { ndim, side, cells })
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    fn stop_action(&self) -> ActionId {
        ActionId(self.ndim as u32)
    }

    fn encode(&self, coords: &[u32], terminal: bool) -> StateId {
        let mut id = 0u64;
        for &x in coords.iter().rev() {
            id = id * u64::from(self.side) + u64::from(x);
        }
        StateId(if terminal { self.cells + id } else { id })
    }

    fn make(&self, coords: Vec<u32>, terminal: bool) -> EnvState {
        EnvState { id: self.encode(&coords, terminal), payload: Payload::Grid { coords, terminal } }
    }

    fn unpack<'a>(&self, state: &'a EnvState) -> Result<(&'a [u32], bool), EnvError> {
        match &state.payload {
            Payload::Grid { coords, terminal } if coords.len() == self.ndim => Ok((coords, *terminal)),
            _ => Err(EnvError::ForeignState),
        }
    }
}

impl Environment for Hypergrid {
    fn kind(&self) -> EnvKind {
        EnvKind::Hypergrid
    }

    fn num_states(&self) -> u64 {
        2 * self.cells
    }

    fn num_terminals(&self) -> u64 {
        self.cells
    }

    fn initial(&self) -> EnvState {
        self.make(alloc::vec![0; self.ndim], false)
    }

    fn state(&self, id: StateId) -> Result<EnvState, EnvError> {
        if id.0 >= self.num_states() {
            return Err(EnvError::UnknownId(id.0));
        }
        let terminal = id.0 >= self.cells;
        let mut rest = id.0 % self.cells;
        let side = u64::from(self.side);
        let coords = (0..self.ndim)
            .map(|_| {
                let x = (rest % side) as u32;
                rest /= side;
                x
            })
            .collect();
        Ok(EnvState { id, payload: Payload::Grid { coords, terminal } })
    }

    fn is_terminal(&self, state: &EnvState) -> bool {
        matches!(state.payload, Payload::Grid { terminal: true, .. })
    }

    fn children(&self, state: &EnvState) -> Result<Vec<(ActionId, EnvState)>, EnvError> {
        let (coords, terminal) = self.unpack(state)?;
        if terminal {
            return Err(EnvError::Contract("terminal states have no children"));
        }
        let mut out = Vec::with_capacity(self.ndim + 1);
        for d in 0..self.ndim {
            if coords[d] + 1 < self.side {
                let mut next = coords.to_vec();
                next[d] += 1;
                out.push((ActionId(d as u32), self.make(next, false)));
            }
        }
        out.push((self.stop_action(), self.make(coords.to_vec(), true)));
        Ok(out)
    }

    fn parents(&self, state: &EnvState) -> Result<Vec<(ActionId, EnvState)>, EnvError> {
        let (coords, terminal) = self.unpack(state)?;
        if terminal {
            return Ok(alloc::vec![(self.stop_action(), self.make(coords.to_vec(), false))]);
        }
        if coords.iter().all(|&x| x == 0) {
            return Err(EnvError::Contract("the initial state has no parents"));
        }
        Ok((0..self.ndim)
            .filter(|&d| coords[d] > 0)
            .map(|d| {
                let mut prev = coords.to_vec();
                prev[d] -= 1;
                (ActionId(d as u32), self.make(prev, false))
            })
            .collect())
    }

    fn feature_dim(&self) -> usize {
        self.ndim * self.side as usize + 1
    }

    fn active_features(&self, state: &EnvState, out: &mut Vec<usize>) {
        if let Payload::Grid { coords, terminal } = &state.payload {
            let side = self.side as usize;
            out.extend(coords.iter().enumerate().map(|(d, &x)| d * side + x as usize));
            if *terminal {
                out.push(self.ndim * side);
            }
        }
    }

    fn terminal_index(&self, state: &EnvState) -> Option<u64> {
        (self.is_terminal(state) && state.id.0 >= self.cells && state.id.0 < 2 * self.cells)
            .then(|| state.id.0 - self.cells)
    }

    fn terminal_at(&self, index: u64) -> Result<EnvState, EnvError> {
        if index >= self.cells {
            return Err(EnvError::UnknownId(index));
        }
        self.state(StateId(self.cells + index))
    }

    fn format_state(&self, state: &EnvState) -> String {
        let mut out = String::new();
        if let Payload::Grid { coords, .. } = &state.payload {
            for (i, x) in coords.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x}");
            }
        }
        out
    }

    fn parse_terminal(&self, text: &str) -> Result<EnvState, EnvError> {
        let err = |reason| EnvError::Parse { text: text.into(), reason };
        let coords = text
            .split(',')
            .map(|part| part.trim().parse::<u32>().map_err(|_| err("coordinate is not an integer")))
            .collect::<Result<Vec<_>, _>>()?;
        if coords.len() != self.ndim {
            return Err(err("wrong number of coordinates"));
        }
        if coords.iter().any(|&x| x >= self.side) {
            return Err(err("coordinate outside the grid"));
        }
        Ok(self.make(coords, true))
    }

    fn max_trajectory_len(&self) -> usize {
        self.ndim * (self.side as usize - 1) + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid_state(env: &Hypergrid, coords: &[u32], terminal: bool) -> EnvState {
        env.make(coords.to_vec(), terminal)
    }

    #[test]
    fn children_of_origin() {
        let env = Hypergrid::new(2, 3).unwrap();
        let kids = env.children(&env.initial()).unwrap();
        assert_eq!(
            kids,
            vec![
                (ActionId(0), grid_state(&env, &[1, 0], false)),
                (ActionId(1), grid_state(&env, &[0, 1], false)),
                (ActionId(2), grid_state(&env, &[0, 0], true)),
            ]
        );
    }

    #[test]
    fn corner_only_stops() {
        let env = Hypergrid::new(2, 3).unwrap();
        let kids = env.children(&grid_state(&env, &[2, 2], false)).unwrap();
        assert_eq!(kids.len(), 1);
        assert!(env.is_terminal(&kids[0].1));
    }

    #[test]
    fn parents_invert_increments() {
        let env = Hypergrid::new(2, 3).unwrap();
        let ps: Vec<_> = env
            .parents(&grid_state(&env, &[1, 1], false))
            .unwrap()
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        assert_eq!(ps, vec![grid_state(&env, &[0, 1], false), grid_state(&env, &[1, 0], false)]);
        let term = env.parents(&grid_state(&env, &[1, 1], true)).unwrap();
        assert_eq!(term, vec![(ActionId(2), grid_state(&env, &[1, 1], false))]);
    }

    #[test]
    fn contract_violations() {
        let env = Hypergrid::new(2, 3).unwrap();
        assert!(matches!(env.children(&grid_state(&env, &[0, 0], true)), Err(EnvError::Contract(_))));
        assert!(matches!(env.parents(&env.initial()), Err(EnvError::Contract(_))));
        assert!(Hypergrid::new(0, 3).is_err());
        assert!(Hypergrid::new(2, 1).is_err());
        assert!(Hypergrid::new(64, 1 << 20).is_err());
    }

    #[test]
    fn text_round_trip() {
        let env = Hypergrid::new(3, 8).unwrap();
        let s = env.parse_terminal("1, 7,0").unwrap();
        assert_eq!(env.format_state(&s), "1,7,0");
        assert!(env.is_terminal(&s));
        assert!(env.parse_terminal("1,8,0").is_err());
        assert!(env.parse_terminal("1,2").is_err());
        assert!(env.parse_terminal("a,b,c").is_err());
    }

    #[test]
    fn features_are_one_hot_per_dimension() {
        let env = Hypergrid::new(2, 4).unwrap();
        let mut f = Vec::new();
        env.active_features(&grid_state(&env, &[3, 1], true), &mut f);
        assert_eq!(f, vec![3, 5, 8]);
        assert_eq!(env.feature_dim(), 9);
    }
}
