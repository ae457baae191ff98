//! Name-keyed factories for interchangeable strategies (backbones,
//! schedulers, loss objectives, miners).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<T, A> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    entries: BTreeMap<String, Factory<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Later registrations under the same name replace earlier ones.
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&A) -> Result<Box<T>> + Send + Sync + 'static,
    ) -> &mut Self {
        self.entries.insert(name.to_string(), Box::new(factory));
        self
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn build(&self, name: &str, args: &A) -> Result<Box<T>> {
        match self.entries.get(name) {
            Some(f) => f(args),
            None => Err(Error::Config(format!(
                "unknown {} '{name}' (known: {})",
                self.kind,
                self.names().join(", ")
            ))),
        }
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
    fn build_by_name_and_report_unknown() {
        let mut r: Registry<dyn Greeter, String> = Registry::new("greeter");
        r.register("hello", |who: &String| Ok(Box::new(Plain(format!("hello {who}")))));
        r.register("bye", |who: &String| Ok(Box::new(Plain(format!("bye {who}")))));
        assert_eq!(r.names(), vec!["bye", "hello"]);
        assert_eq!(r.build("hello", &"cat".into()).unwrap().greet(), "hello cat");
        let err = r.build("nope", &String::new()).err().unwrap().to_string();
        assert!(err.contains("unknown greeter 'nope'") && err.contains("bye, hello"), "{err}");
    }
}
