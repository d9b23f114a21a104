//! Addressing of named parameter tensors inside nested parameter records.

use serde::{Deserialize, Serialize};

/// Position of one parameter tensor: its role plus the layer, scale and head
/// it belongs to, where those apply.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamKey {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scale: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub head: Option<usize>,
    pub role: String,
}

impl ParamKey {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn role(&self, role: &str) -> Self {
        Self {
            role: role.to_string(),
            ..self.clone()
        }
    }

    pub fn layer(&self, l: usize) -> Self {
        Self {
            layer: Some(l),
            ..self.clone()
        }
    }

    pub fn scale(&self, s: usize) -> Self {
        Self {
            scale: Some(s),
            ..self.clone()
        }
    }

    pub fn head(&self, h: usize) -> Self {
        Self {
            head: Some(h),
            ..self.clone()
        }
    }

    /// Dotted name such as `layer0.scale1.head0.hq`.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if let Some(l) = self.layer {
            parts.push(format!("layer{l}"));
        }
        if let Some(s) = self.scale {
            parts.push(format!("scale{s}"));
        }
        if let Some(h) = self.head {
            parts.push(format!("head{h}"));
        }
        parts.push(self.role.clone());
        parts.join(".")
    }
}

/// A record of parameter values that can be traversed in a fixed order and
/// rebuilt with a different value type (e.g. tensors to graph variables).
pub trait ParamTree<V> {
    type Rebind<U>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> Self::Rebind<U>;
    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V));
    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V));

    fn map_params<U>(&self, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> Self::Rebind<U> {
        self.map_keyed(&ParamKey::root(), f)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&ParamKey, &V)) {
        self.visit_keyed(&ParamKey::root(), f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        self.visit_keyed_mut(&ParamKey::root(), f)
    }

    /// All values in traversal order.
    fn flatten(&self) -> Vec<V>
    where
        V: Clone,
    {
        let mut out = Vec::new();
        self.visit_params(&mut |_, v| out.push(v.clone()));
        out
    }
}

impl<V, P: ParamTree<V>> ParamTree<V> for Vec<P> {
    type Rebind<U> = Vec<P::Rebind<U>>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> Self::Rebind<U> {
        self.iter()
            .enumerate()
            .map(|(l, p)| p.map_keyed(&at.layer(l), f))
            .collect()
    }

    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V)) {
        for (l, p) in self.iter().enumerate() {
            p.visit_keyed(&at.layer(l), f);
        }
    }

    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        for (l, p) in self.iter_mut().enumerate() {
            p.visit_keyed_mut(&at.layer(l), f);
        }
    }
}
