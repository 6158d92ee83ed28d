use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names and shapes of every parameter tensor in one flat vector. The layout
/// is a pure function of a model config, which is what makes checkpoints
/// loadable by name and parameter counts checkable by arithmetic.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder {
            specs: Vec::new(),
            total: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        let idx = self.by_name[name];
        &self.specs[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn slice<'a>(&self, params: &'a [f64], name: &str) -> &'a [f64] {
        let spec = self.spec(name);
        &params[spec.offset..spec.offset + spec.len()]
    }

    pub fn slice_mut<'a>(&self, params: &'a mut [f64], name: &str) -> &'a mut [f64] {
        let spec = self.spec(name);
        &mut params[spec.offset..spec.offset + spec.len()]
    }

    /// Two adjacent tensors of one buffer as disjoint mutable slices, the
    /// usual weight/bias pairing in backward passes.
    pub fn two_mut<'a>(
        &self,
        buf: &'a mut [f64],
        a: &str,
        b: &str,
    ) -> (&'a mut [f64], &'a mut [f64]) {
        let sa = self.spec(a);
        let sb = self.spec(b);
        assert_eq!(
            sa.offset + sa.len(),
            sb.offset,
            "{a} and {b} are not adjacent"
        );
        let (head, tail) = buf.split_at_mut(sb.offset);
        (&mut head[sa.offset..], &mut tail[..sb.len()])
    }
}

pub struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl LayoutBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> &mut Self {
        let name = name.into();
        assert!(
            !self.specs.iter().any(|s| s.name == name),
            "duplicate tensor name {name}"
        );
        let spec = TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += spec.len();
        self.specs.push(spec);
        self
    }

    pub fn build(self) -> ParamLayout {
        let by_name = self
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        ParamLayout {
            specs: self.specs,
            by_name,
            total: self.total,
        }
    }
}
