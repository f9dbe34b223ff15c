use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Color, PersonSpec};
use crate::textpipe::tokenize;

/// Describable clothing item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Hat,
    Shirt,
    Pants,
    Shoes,
    Bag,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Hat,
        Attribute::Shirt,
        Attribute::Pants,
        Attribute::Shoes,
        Attribute::Bag,
    ];

    pub fn noun(self) -> &'static str {
        match self {
            Attribute::Hat => "hat",
            Attribute::Shirt => "shirt",
            Attribute::Pants => "pants",
            Attribute::Shoes => "shoes",
            Attribute::Bag => "bag",
        }
    }

    pub fn from_noun(word: &str) -> Option<Attribute> {
        Attribute::ALL.into_iter().find(|a| a.noun() == word)
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn possessive(pronoun: &str) -> &'static str {
    if pronoun == "he" {
        "his"
    } else {
        "her"
    }
}

/// Template description of a person. The main clause names shirt and pants;
/// further sentences name the hat and bag when present and always the shoes.
pub fn render_description(spec: &PersonSpec, rng: &mut impl Rng) -> String {
    let g = spec.gender.noun();
    let p = spec.gender.pronoun();
    let (s, t) = (spec.shirt.name(), spec.pants.name());
    let main = match rng.gen_range(0..5) {
        0 => format!("the {g} wears a {s} shirt and {t} pants."),
        1 => format!("this {g} is wearing {t} pants and a {s} shirt."),
        2 => format!("a {g} has on a {s} shirt and {t} pants."),
        3 => format!("wearing a {s} shirt and {t} pants, the {g} walks along."),
        _ => format!("the {g} is dressed in {t} pants and a {s} shirt."),
    };

    let mut extra = Vec::new();
    if let Some(hat) = spec.hat {
        extra.push(if rng.gen_bool(0.5) {
            format!("{p} wears a {hat} hat.")
        } else {
            format!("{p} also has a {hat} hat.")
        });
    }
    if let Some(bag) = spec.bag {
        extra.push(if rng.gen_bool(0.5) {
            format!("{p} carries a {bag} bag.")
        } else {
            format!("a {bag} bag is over {} shoulder.", possessive(p))
        });
    }
    let shoes = spec.shoes;
    extra.push(if rng.gen_bool(0.7) {
        format!("{p} wears a pair of {shoes} shoes.")
    } else {
        format!("{p} has {shoes} shoes.")
    });
    extra.shuffle(rng);

    std::iter::once(main)
        .chain(extra)
        .map(|sentence| capitalize(&sentence))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `(attribute, color)` for every "<color> <item>" mention in a text.
pub fn mentioned_attributes(text: &str) -> Vec<(Attribute, Color)> {
    let toks = tokenize(text);
    toks.windows(2)
        .filter_map(|w| Some((Attribute::from_noun(&w[1])?, w[0].parse::<Color>().ok()?)))
        .collect()
}
