//! Target texts and neutral prefix augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{}";

pub const DEFAULT_PREFIXES: [&str; 8] = [
    "a photo of a {}",
    "a {}",
    "an image of a {}",
    "the {}",
    "image of a {}",
    "image of the {}",
    "photo of a {}",
    "photo of the {}",
];

/// The global text describes the whole object, the local text its texture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetTexts {
    pub global_text: String,
    pub local_text: String,
}

impl TargetTexts {
    pub fn new(global_text: impl Into<String>, local_text: impl Into<String>) -> Result<Self> {
        let t = TargetTexts {
            global_text: global_text.into(),
            local_text: local_text.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_text.trim().is_empty() || self.local_text.trim().is_empty() {
            return Err(Error::invalid("target texts must be nonempty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixBank {
    prefixes: Vec<String>,
    n_active_global: usize,
    n_active_local: usize,
}

/// The eight neutral templates, all active for both texts.
pub fn default_prefix_bank() -> PrefixBank {
    PrefixBank {
        prefixes: DEFAULT_PREFIXES.iter().map(|s| s.to_string()).collect(),
        n_active_global: DEFAULT_PREFIXES.len(),
        n_active_local: DEFAULT_PREFIXES.len(),
    }
}

impl PrefixBank {
    pub fn new(prefixes: Vec<String>, n_active_global: usize, n_active_local: usize) -> Result<Self> {
        for p in &prefixes {
            if p.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::invalid(format!("template {p:?} must contain exactly one {{}}")));
            }
        }
        if n_active_global > prefixes.len() || n_active_local > prefixes.len() {
            return Err(Error::invalid(format!(
                "cannot activate {n_active_global}/{n_active_local} of {} templates",
                prefixes.len()
            )));
        }
        Ok(PrefixBank {
            prefixes,
            n_active_global,
            n_active_local,
        })
    }

    /// The default templates followed by `extra`.
    pub fn with_extra(extra: &[String], n_active_global: usize, n_active_local: usize) -> Result<Self> {
        let mut prefixes = default_prefix_bank().prefixes;
        prefixes.extend(extra.iter().cloned());
        PrefixBank::new(prefixes, n_active_global, n_active_local)
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    pub fn n_active_global(&self) -> usize {
        self.n_active_global
    }

    pub fn n_active_local(&self) -> usize {
        self.n_active_local
    }

    pub fn with_active(&self, n_active_global: usize, n_active_local: usize) -> Result<Self> {
        PrefixBank::new(self.prefixes.clone(), n_active_global, n_active_local)
    }
}

pub fn format_template(template: &str, text: &str) -> String {
    template.replacen(PLACEHOLDER, text, 1)
}

fn pick<R: Rng + ?Sized>(bank: &PrefixBank, n_active: usize, text: &str, rng: &mut R) -> String {
    if n_active == 0 {
        return text.to_string();
    }
    format_template(&bank.prefixes[rng.random_range(0..n_active)], text)
}

/// Draws one active template for each text, independently.
pub fn augment_texts<R: Rng + ?Sized>(texts: &TargetTexts, bank: &PrefixBank, rng: &mut R) -> TargetTexts {
    TargetTexts {
        global_text: pick(bank, bank.n_active_global, &texts.global_text, rng),
        local_text: pick(bank, bank.n_active_local, &texts.local_text, rng),
    }
}

/// The `text.*` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub global: String,
    pub local: String,
    pub n_prefixes_global: usize,
    pub n_prefixes_local: usize,
    pub extra_prefixes: Vec<String>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            global: String::new(),
            local: String::new(),
            n_prefixes_global: DEFAULT_PREFIXES.len(),
            n_prefixes_local: DEFAULT_PREFIXES.len(),
            extra_prefixes: Vec::new(),
        }
    }
}

impl TextConfig {
    pub fn targets(&self) -> Result<TargetTexts> {
        TargetTexts::new(self.global.clone(), self.local.clone())
            .map_err(|_| Error::Config("text.global and text.local must both be set".into()))
    }

    pub fn bank(&self) -> Result<PrefixBank> {
        PrefixBank::with_extra(&self.extra_prefixes, self.n_prefixes_global, self.n_prefixes_local)
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_bank_formats_every_template() {
        let bank = default_prefix_bank();
        assert_eq!(bank.len(), 8);
        for p in bank.prefixes() {
            let s = format_template(p, "swan");
            assert!(s.ends_with("swan") && !s.contains("{}"));
        }
        assert_eq!(format_template("a photo of a {}", "swan made of cactus"), "a photo of a swan made of cactus");
    }

    #[test]
    fn zero_active_passes_through() {
        let texts = TargetTexts::new("swan made of cactus", "cactus").unwrap();
        let bank = default_prefix_bank().with_active(0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_texts(&texts, &bank, &mut rng), texts);
    }

    #[test]
    fn templates_need_one_placeholder() {
        assert!(PrefixBank::new(vec!["no slot".into()], 1, 1).is_err());
        assert!(PrefixBank::new(vec!["{} and {}".into()], 1, 1).is_err());
        assert!(PrefixBank::new(vec!["a {}".into()], 2, 0).is_err());
        assert!(TargetTexts::new("", "x").is_err());
    }

    #[test]
    fn draws_are_uniform_over_active_prefixes() {
        let texts = TargetTexts::new("swan", "feathers").unwrap();
        let bank = default_prefix_bank().with_active(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let out = augment_texts(&texts, &bank, &mut rng);
            let i = (0..4)
                .find(|&i| out.global_text == format_template(DEFAULT_PREFIXES[i], "swan"))
                .expect("global text uses one of the first four templates");
            counts[i] += 1;
            assert!((0..4).any(|i| out.local_text == format_template(DEFAULT_PREFIXES[i], "feathers")));
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.03, "frequency {f}");
        }
    }
}
