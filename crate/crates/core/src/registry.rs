//! Name-keyed registries of trait objects.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{invalid, Result};

/// Strategies registered under unique names, iterated in name order.
pub struct Registry<T: ?Sized> {
    items: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Default for Registry<T> {
    fn default() -> Self {
        Self { items: BTreeMap::new() }
    }
}

impl<T: ?Sized> Registry<T> {
    pub fn register(&mut self, name: impl Into<String>, item: Arc<T>) -> Result<()> {
        let name = name.into();
        if self.items.contains_key(&name) {
            return invalid(format!("'{name}' is already registered"));
        }
        self.items.insert(name, item);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        match self.items.get(name) {
            Some(item) => Ok(item.clone()),
            None => invalid(format!("unknown name '{name}' (known: {})", self.names().join(", "))),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.items.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<T>)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
