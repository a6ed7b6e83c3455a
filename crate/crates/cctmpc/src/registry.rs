//! Name-keyed registries for runtime-selected strategies.
//!
//! Solver backends, disturbance policies, and plant policies are all chosen
//! by name from a scenario file or the command line. Each family registers
//! factory functions here; lookup failures report the known names so a typo
//! in a scenario is diagnosable without reading source.

use std::collections::BTreeMap;

pub type Factory<I, T> = fn(&I) -> Result<Box<T>, String>;

pub struct Registry<I, T: ?Sized> {
    entries: BTreeMap<&'static str, Factory<I, T>>,
}

impl<I, T: ?Sized> Registry<I, T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory<I, T>) {
        let prev = self.entries.insert(name, factory);
        assert!(prev.is_none(), "strategy '{name}' registered twice");
    }

    pub fn create(&self, name: &str, input: &I) -> Result<Box<T>, String> {
        match self.entries.get(name) {
            Some(factory) => factory(input),
            None => Err(format!(
                "unknown strategy '{name}'; known: {}",
                self.names().join(", ")
            )),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

impl<I, T: ?Sized> Default for Registry<I, T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Plain(String);
    impl Greeter for Plain {
        fn greet(&self) -> String {
            self.0.clone()
        }
    }

    #[test]
    fn lookup_and_unknown_name() {
        let mut reg: Registry<String, dyn Greeter> = Registry::new();
        reg.register("plain", |s| Ok(Box::new(Plain(s.clone()))));
        let g = reg.create("plain", &"hi".to_string()).unwrap();
        assert_eq!(g.greet(), "hi");
        let err = match reg.create("nope", &"hi".to_string()) {
            Err(e) => e,
            Ok(_) => panic!("expected lookup failure"),
        };
        assert!(err.contains("plain"), "error should list known names: {err}");
    }
}
