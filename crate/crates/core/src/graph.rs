use std::fmt;

/// Binary directed adjacency over `n` agents.
///
/// Entry `(i, j)` set means information flows from sender `j` to receiver
/// `i`, so row `i` lists the neighbors agent `i` attends to.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RelationGraph {
    n: usize,
    adj: Vec<bool>,
}

impl RelationGraph {
    pub fn empty(n: usize) -> Self {
        RelationGraph {
            n,
            adj: vec![false; n * n],
        }
    }

    /// All-ones adjacency with zero diagonal.
    pub fn fully_connected(n: usize) -> Self {
        Self::from_fn(n, |i, j| i != j)
    }

    /// Builds a graph from a predicate; the diagonal is always cleared.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut g = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j && f(i, j) {
                    g.adj[i * n + j] = true;
                }
            }
        }
        g
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    /// Sets edge `(i, j)`; self loops are ignored.
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        if i != j {
            self.adj[i * self.n + j] = value;
        }
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().filter(|&&e| e).count()
    }

    pub fn in_degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.get(i, j)).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| !self.get(i, i))
    }

    /// Off-diagonal ordered pairs `(receiver, sender)` in row-major order.
    pub fn directed_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
    }

    /// Relabels agents: node `perm[k]` of the result is node `k` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut g = Self::empty(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    g.set(perm[i], perm[j], true);
                }
            }
        }
        g
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.adj
    }
}

impl fmt::Debug for RelationGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "RelationGraph({})", self.n)?;
        for i in 0..self.n {
            let row: String = (0..self.n)
                .map(|j| if self.get(i, j) { '1' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}
