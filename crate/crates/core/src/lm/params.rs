//! Named parameter blocks. A block is stored once; tied weights are two
//! uses of the same [`ParamId`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Mat, Scalar, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

impl<F: Scalar> Param<F> {
    pub fn view(&self) -> View<'_, F> {
        View::new(&self.data, self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

/// How a new block is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        decay: bool,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        let data = match init {
            Init::Zeros => vec![F::zero(); rows * cols],
            Init::Ones => vec![F::one(); rows * cols],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..rows * cols)
                    .map(|_| F::from_f64_lossy(dist.sample(rng)))
                    .collect()
            }
        };
        self.params.push(Param {
            name,
            rows,
            cols,
            data,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Appends already-built blocks (used when loading checkpoints).
    pub fn extend_raw(&mut self, blocks: impl IntoIterator<Item = Param<F>>) {
        self.params.extend(blocks);
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[F] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.params[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars (each stored block counted once).
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// A store with identical layout and every value zero; used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    data: vec![F::zero(); p.data.len()],
                    decay: p.decay,
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// `self += other`, block by block.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum()
    }

    /// Converts every block to another element type.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    data: p.data.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Copies values from `other`, matching blocks by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape("parameter block count", self.len(), other.len()));
        }
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::invalid("checkpoint", format!("missing block {}", p.name)))?;
            if (src.rows, src.cols) != (p.rows, p.cols) {
                return Err(Error::shape(
                    format!("block {}", p.name),
                    format!("{}x{}", p.rows, p.cols),
                    format!("{}x{}", src.rows, src.cols),
                ));
            }
            p.data.clone_from(&src.data);
        }
        Ok(())
    }

    pub fn mat(&self, id: ParamId) -> Mat<F> {
        let p = self.get(id);
        Mat::from_vec(p.rows, p.cols, p.data.clone())
    }
}
