//! Name-keyed registries for the interchangeable pieces of the detector.
//!
//! Activations and classifier architectures are looked up by name at runtime
//! (from configuration files or command-line flags). The built-in sets can be
//! extended with [`ActivationRegistry::register`] and
//! [`ArchitectureRegistry::register`].

use std::collections::BTreeMap;

use crate::classifiers::{pedestrian_classifier_spec, zone_classifier_spec, BuildOptions, NetworkSpec};
use crate::error::{Error, Result};
use crate::ops::activation::{Activation, Relu, Selu};
use crate::scalar::Scalar;

pub type ActivationCtor<T> = fn() -> Box<dyn Activation<T>>;

pub struct ActivationRegistry<T: Scalar> {
    entries: BTreeMap<&'static str, ActivationCtor<T>>,
}

impl<T: Scalar> ActivationRegistry<T> {
    pub fn empty() -> Self {
        ActivationRegistry { entries: BTreeMap::new() }
    }

    /// `selu` and `relu`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("selu", || Box::new(Selu::default()));
        r.register("relu", || Box::new(Relu));
        r
    }

    pub fn register(&mut self, name: &'static str, ctor: ActivationCtor<T>) {
        self.entries.insert(name, ctor);
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn Activation<T>>> {
        self.entries
            .get(name)
            .map(|ctor| ctor())
            .ok_or_else(|| Error::Unknown {
                kind: "activation",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

pub type ArchitectureCtor = fn(&BuildOptions) -> NetworkSpec;

/// Classifier layouts by name (`zone`, `pedestrian`).
pub struct ArchitectureRegistry {
    entries: BTreeMap<&'static str, ArchitectureCtor>,
}

impl ArchitectureRegistry {
    pub fn empty() -> Self {
        ArchitectureRegistry { entries: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("zone", zone_classifier_spec);
        r.register("pedestrian", pedestrian_classifier_spec);
        r
    }

    pub fn register(&mut self, name: &'static str, ctor: ArchitectureCtor) {
        self.entries.insert(name, ctor);
    }

    pub fn spec(&self, name: &str, opts: &BuildOptions) -> Result<NetworkSpec> {
        self.entries
            .get(name)
            .map(|ctor| ctor(opts))
            .ok_or_else(|| Error::Unknown {
                kind: "architecture",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
