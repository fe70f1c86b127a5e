//! Seeded generators for desk-scale experiments: a Russian-like lexicon
//! built from real roots and affixes with known (word, root) analyses, a
//! Zipfian running-text corpus over it, and a Latin transliteration for
//! two-script setups.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::morpho::MorphRecord;

const NOUN_ROOTS: &[&str] = &[
    "вод", "лес", "дом", "город", "рук", "книг", "друг", "земл", "стол", "мост", "голос", "сад", "двор", "мир",
    "свет", "ветр", "дорог", "гор", "рек", "пол", "камн", "труд", "хлеб", "школ", "рыб", "птиц", "звезд", "сердц",
    "окн", "дерев", "ключ", "снег", "огн", "лист", "берег", "море", "неб", "сил", "слов", "мысл", "цвет", "шум",
    "зверь", "голов", "стран", "народ", "войн", "дел", "врем", "мест",
];

const VERB_ROOTS: &[&str] = &[
    "говор", "ход", "нес", "вез", "пис", "чит", "дел", "люб", "знай", "дума", "работ", "смотр", "слуш", "жив",
    "стро", "учи", "лет", "плыв", "крич", "мол", "ищ", "рез", "бер", "дав", "пуск", "став", "мест", "тяг", "ступ",
    "вод", "нос", "гляд", "реш", "кол", "кид",
];

const ADJ_ROOTS: &[&str] = &[
    "бел", "черн", "красн", "нов", "стар", "молод", "добр", "зл", "тих", "громк", "светл", "темн", "быстр", "медлен",
    "высок", "низ", "глубок", "широк", "узк", "тепл", "холодн", "сух", "мокр", "прям", "крив", "син", "зелен",
    "мягк", "тверд", "легк",
];

const PREFIXES: &[&str] = &["", "", "", "по", "при", "за", "пере", "вы", "на", "от", "под", "про", "раз", "у", "до", "об"];

const NOUN_SUFFIXES: &[&str] = &["", "", "ник", "ость", "к", "ец", "иц", "ств", "ок", "ушк"];
const VERB_SUFFIXES: &[&str] = &["а", "и", "ива", "ова", "е", "ыва"];
const ADJ_SUFFIXES: &[&str] = &["", "", "ов", "ск", "лив", "еньк", "оват"];

const NOUN_ENDINGS: &[&str] = &["", "а", "у", "ом", "е", "ы", "ов", "ам", "ами", "ах", "ой", "и"];
const VERB_ENDINGS: &[&str] = &["ть", "ю", "ешь", "ет", "ем", "ете", "ют", "л", "ла", "ло", "ли", "й", "йте"];
const ADJ_ENDINGS: &[&str] = &["ый", "ая", "ое", "ые", "ого", "ому", "ой", "ую", "ых", "ым", "ыми", "ом"];

const FUNCTION_WORDS: &[&str] = &[
    "и", "в", "не", "на", "что", "он", "с", "как", "это", "по", "но", "к", "у", "из", "за", "от", "о", "так", "же",
    "для", "она", "они", "мы", "вы", "я", "бы", "уже", "только", "еще", "когда", "где", "там", "тут", "все", "его",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pos {
    Noun,
    Verb,
    Adj,
}

/// A derived stem: prefix + root + derivational suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexeme {
    pub prefix: &'static str,
    pub root: &'static str,
    pub suffix: &'static str,
    pos: Pos,
}

impl Lexeme {
    fn endings(&self) -> &'static [&'static str] {
        match self.pos {
            Pos::Noun => NOUN_ENDINGS,
            Pos::Verb => VERB_ENDINGS,
            Pos::Adj => ADJ_ENDINGS,
        }
    }

    pub fn form(&self, ending: &str) -> String {
        format!("{}{}{}{}", self.prefix, self.root, self.suffix, ending)
    }
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    /// Rank order; earlier lexemes are sampled more often.
    pub lexemes: Vec<Lexeme>,
}

impl Lexicon {
    /// Every root gets a bare lexeme plus `derivations` random derived ones,
    /// shuffled into a seeded frequency rank.
    pub fn generate(seed: u64, derivations: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut lexemes = Vec::new();
        let groups: [(&[&'static str], &[&'static str], Pos); 3] = [
            (NOUN_ROOTS, NOUN_SUFFIXES, Pos::Noun),
            (VERB_ROOTS, VERB_SUFFIXES, Pos::Verb),
            (ADJ_ROOTS, ADJ_SUFFIXES, Pos::Adj),
        ];
        for (roots, suffixes, pos) in groups {
            for &root in roots {
                let bare = Lexeme { prefix: "", root, suffix: suffixes[0], pos };
                if seen.insert(bare.form("")) {
                    lexemes.push(bare);
                }
                for _ in 0..derivations {
                    let lx = Lexeme {
                        prefix: PREFIXES[rng.random_range(0..PREFIXES.len())],
                        root,
                        suffix: suffixes[rng.random_range(0..suffixes.len())],
                        pos,
                    };
                    if seen.insert(lx.form("")) {
                        lexemes.push(lx);
                    }
                }
            }
        }
        for i in (1..lexemes.len()).rev() {
            let j = rng.random_range(0..=i);
            lexemes.swap(i, j);
        }
        Self { lexemes }
    }

    /// Distinct (word form, root) records, `n` at most, drawn from the
    /// most frequent lexemes first so they occur in generated text.
    pub fn records(&self, n: usize, seed: u64) -> Vec<MorphRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        'outer: for lx in &self.lexemes {
            let endings = lx.endings();
            for _ in 0..3 {
                let word = lx.form(endings[rng.random_range(0..endings.len())]);
                if seen.insert(word.clone()) {
                    out.push(MorphRecord::new(word, lx.root));
                    if out.len() >= n {
                        break 'outer;
                    }
                }
            }
        }
        out
    }
}

/// Zipfian text over a lexicon, interleaved with function words.
pub struct TextGenerator<'a> {
    lexicon: &'a Lexicon,
    zipf: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl<'a> TextGenerator<'a> {
    pub fn new(lexicon: &'a Lexicon, seed: u64) -> Self {
        let weights: Vec<f64> = (1..=lexicon.lexemes.len()).map(|r| 1.0 / (r as f64).powf(0.9)).collect();
        Self {
            lexicon,
            zipf: WeightedIndex::new(weights).expect("non-empty lexicon"),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn word(&mut self) -> String {
        if self.rng.random_bool(0.3) {
            return FUNCTION_WORDS[self.rng.random_range(0..FUNCTION_WORDS.len())].to_string();
        }
        let lx = &self.lexicon.lexemes[self.zipf.sample(&mut self.rng)];
        let endings = lx.endings();
        lx.form(endings[self.rng.random_range(0..endings.len())])
    }

    pub fn sentence(&mut self) -> String {
        let n = self.rng.random_range(4..14);
        let mut words: Vec<String> = (0..n).map(|_| self.word()).collect();
        let mut first = words[0].chars();
        if let Some(c) = first.next() {
            words[0] = c.to_uppercase().chain(first).collect();
        }
        let end = [".", ".", ".", "!", "?"][self.rng.random_range(0..5)];
        format!("{}{end}", words.join(" "))
    }

    pub fn paragraph(&mut self) -> String {
        let n = self.rng.random_range(3..9);
        (0..n).map(|_| self.sentence()).collect::<Vec<_>>().join(" ")
    }

    /// Paragraph documents until at least `min_bytes` of text exist.
    pub fn documents(&mut self, min_bytes: usize, id_prefix: &str) -> Vec<Document> {
        let mut out = Vec::new();
        let mut bytes = 0;
        while bytes < min_bytes {
            let text = self.paragraph();
            bytes += text.len();
            out.push(Document::new(format!("{id_prefix}{}", out.len()), text, "synthetic"));
        }
        out
    }
}

const TRANSLIT: &[(char, &str)] = &[
    ('а', "a"), ('б', "b"), ('в', "v"), ('г', "g"), ('д', "d"), ('е', "e"), ('ё', "yo"), ('ж', "zh"), ('з', "z"),
    ('и', "i"), ('й', "j"), ('к', "k"), ('л', "l"), ('м', "m"), ('н', "n"), ('о', "o"), ('п', "p"), ('р', "r"),
    ('с', "s"), ('т', "t"), ('у', "u"), ('ф', "f"), ('х', "h"), ('ц', "c"), ('ч', "ch"), ('ш', "sh"), ('щ', "sch"),
    ('ъ', ""), ('ы', "y"), ('ь', ""), ('э', "e"), ('ю', "yu"), ('я', "ya"),
];

/// Latin rendering of Cyrillic text; other characters pass through.
pub fn transliterate(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        let lower = c.to_lowercase().next().unwrap_or(c);
        match TRANSLIT.iter().find(|(k, _)| *k == lower) {
            Some((_, latin)) if c != lower => {
                let mut cs = latin.chars();
                if let Some(f) = cs.next() {
                    out.extend(f.to_uppercase());
                    out.push_str(cs.as_str());
                }
            }
            Some((_, latin)) => out.push_str(latin),
            None => out.push(c),
        }
    }
    out
}

/// Two corpora with shared structure and different scripts: the same
/// generator rendered in Latin letters (`old`) and in Cyrillic (`new`).
/// `old_mix` is the fraction of `old` documents left in Cyrillic.
pub fn bilingual_corpora(seed: u64, docs: usize, old_mix: f64) -> (Vec<String>, Vec<String>) {
    let lexicon = Lexicon::generate(seed, 4);
    let mut gen_old = TextGenerator::new(&lexicon, seed.wrapping_add(1));
    let mut gen_new = TextGenerator::new(&lexicon, seed.wrapping_add(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let old = (0..docs)
        .map(|_| {
            let p = gen_old.paragraph();
            if rng.random_bool(old_mix) {
                p
            } else {
                transliterate(&p)
            }
        })
        .collect();
    let new = (0..docs).map(|_| gen_new.paragraph()).collect();
    (old, new)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_contain_their_root() {
        let lex = Lexicon::generate(7, 6);
        let recs = lex.records(1200, 7);
        assert_eq!(recs.len(), 1200);
        assert!(recs.iter().all(|r| r.word.contains(&r.root)));
    }

    #[test]
    fn generation_is_seeded() {
        let lex = Lexicon::generate(3, 2);
        let a = TextGenerator::new(&lex, 9).documents(2000, "d");
        let b = TextGenerator::new(&lex, 9).documents(2000, "d");
        assert_eq!(a, b);
        assert!(a.iter().map(|d| d.text.len()).sum::<usize>() >= 2000);
    }

    #[test]
    fn transliteration() {
        assert_eq!(transliterate("Школа и вода!"), "Shkola i voda!");
    }
}
