use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::{Rng, TokenDistribution, TokenId};
use crate::error::{Error, Result};

/// Exact n-gram model: the next-token distribution depends only on the last
/// `order` tokens. Shorter contexts back off by dropping the oldest token until
/// a table entry exists.
#[derive(Debug, Clone)]
pub struct TabularLM {
    order: usize,
    vocab: usize,
    table: HashMap<Vec<TokenId>, TokenDistribution>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    order: usize,
    vocab: usize,
    entries: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    context: Vec<TokenId>,
    probs: Vec<f64>,
}

impl TabularLM {
    pub fn new(
        order: usize,
        vocab: usize,
        entries: impl IntoIterator<Item = (Vec<TokenId>, TokenDistribution)>,
    ) -> Result<Self> {
        let mut table = HashMap::new();
        for (context, dist) in entries {
            if context.len() > order {
                return Err(Error::InvalidInput(format!(
                    "context {context:?} longer than order {order}"
                )));
            }
            if let Some(&id) = context.iter().find(|&&t| t >= vocab) {
                return Err(Error::TokenOutOfRange { id, limit: vocab });
            }
            if dist.len() != vocab {
                return Err(Error::InvalidInput(format!(
                    "context {context:?}: distribution over {} tokens, vocab is {vocab}",
                    dist.len()
                )));
            }
            table.insert(context, dist);
        }
        if !table.contains_key(&Vec::new()) {
            return Err(Error::InvalidInput(
                "table needs an entry for the empty context".into(),
            ));
        }
        Ok(Self { order, vocab, table })
    }

    /// Full table over every context of length `0..=order`, each row drawn
    /// from a symmetric Dirichlet with the given concentration.
    pub fn random(vocab: usize, order: usize, concentration: f64, rng: &mut Rng) -> Result<Self> {
        let mut entries = Vec::new();
        for len in 0..=order {
            let count = vocab.pow(len as u32);
            for code in 0..count {
                let mut context = vec![0; len];
                let mut c = code;
                for slot in context.iter_mut().rev() {
                    *slot = c % vocab;
                    c /= vocab;
                }
                entries.push((context, dirichlet(vocab, concentration, rng)?));
            }
        }
        Self::new(order, vocab, entries)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn lookup(&self, prefix: &[TokenId]) -> Result<&TokenDistribution> {
        let start = prefix.len().saturating_sub(self.order);
        let mut context = &prefix[start..];
        loop {
            if let Some(d) = self.table.get(context) {
                return Ok(d);
            }
            // The empty context always exists, so this terminates.
            context = &context[1..];
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<TokenId>, &TokenDistribution)> {
        self.table.iter()
    }

    /// Exact probability of every continuation of `prompt` of length `len`,
    /// indexed by the base-`vocab` number formed by the tokens.
    pub fn sequence_distribution(&self, prompt: &[TokenId], len: usize, temperature: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.vocab.pow(len as u32)];
        let mut seq = prompt.to_vec();
        self.fill(&mut seq, prompt.len(), len, 1.0, 0, temperature, &mut out)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn fill(
        &self,
        seq: &mut Vec<TokenId>,
        base: usize,
        len: usize,
        mass: f64,
        code: usize,
        temperature: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if seq.len() == base + len {
            out[code] += mass;
            return Ok(());
        }
        let dist = self.lookup(seq)?.with_temperature(temperature)?;
        for (tok, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            seq.push(tok);
            self.fill(seq, base, len, mass * p, code * self.vocab + tok, temperature, out)?;
            seq.pop();
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<TableEntry> = self
            .table
            .iter()
            .map(|(c, d)| TableEntry {
                context: c.clone(),
                probs: d.probs().to_vec(),
            })
            .collect();
        entries.sort_by(|a, b| (a.context.len(), &a.context).cmp(&(b.context.len(), &b.context)));
        let file = TableFile {
            order: self.order,
            vocab: self.vocab,
            entries,
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TableFile =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let entries = file
            .entries
            .into_iter()
            .map(|e| Ok((e.context, TokenDistribution::new(e.probs)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.order, file.vocab, entries)
    }
}

/// Symmetric Dirichlet draw via normalized Gamma variates (Marsaglia-Tsang,
/// with the `alpha < 1` boost).
pub(crate) fn dirichlet(vocab: usize, concentration: f64, rng: &mut Rng) -> Result<TokenDistribution> {
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(Error::InvalidInput("concentration must be positive".into()));
    }
    let weights: Vec<f64> = (0..vocab).map(|_| gamma(concentration, rng).max(1e-300)).collect();
    TokenDistribution::from_weights(weights)
}

fn gamma(alpha: f64, rng: &mut Rng) -> f64 {
    if alpha < 1.0 {
        let u = 1.0 - rng.uniform();
        return gamma(alpha + 1.0, rng) * u.powf(1.0 / alpha);
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = 1.0 - rng.uniform();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}
