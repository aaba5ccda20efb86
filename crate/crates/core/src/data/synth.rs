//! Synthetic parallel bilingual fact world.
//!
//! Two "languages" share one grammar but draw their surface forms from
//! syllabaries with disjoint consonant sets, so no content token can ever be
//! shared: any cross-language neuron overlap a model learns is semantic, not
//! lexical. Facts are (subject, relation, object) triples over one entity
//! pool, verbalized per language as `subject relation-word object`, with
//! optional function-word fillers before and inside the prompt.
//!
//! Filler words split into a "common" set used for locating paraphrases and
//! a "held-out" set reserved for generality rephrasings; both appear in the
//! training corpus, so held-out rephrasings are new strings over known words.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EditGroup, LangEntry, PromptAnswer};
use crate::error::{Error, Result};
use crate::seeds;

pub const LANGS: [&str; 2] = ["l1", "l2"];

const L1_CONSONANTS: &[char] = &['b', 'd', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const L2_CONSONANTS: &[char] = &['c', 'f', 'h', 'j', 'q', 'w', 'x', 'y'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct WorldCfg {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub n_edit_groups: usize,
    /// Held-out rephrasings per language per group.
    pub n_rephrases: usize,
    /// Locating paraphrases per language per group.
    pub n_paraphrases: usize,
    /// Extra filler variants of each fact in the training corpus.
    pub n_train_variants: usize,
    pub seed: u64,
}

impl Default for WorldCfg {
    fn default() -> Self {
        WorldCfg {
            n_entities: 50,
            n_relations: 8,
            n_facts: 200,
            n_edit_groups: 20,
            n_rephrases: 3,
            n_paraphrases: 30,
            n_train_variants: 2,
            seed: 7,
        }
    }
}

/// The generated world: lexicons, facts, and attribute assignments.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FactWorld {
    pub langs: Vec<String>,
    /// Entity surfaces, `entities[i][lang]`.
    pub entities: Vec<Vec<String>>,
    /// Attribute-value surfaces.
    pub attr_values: Vec<Vec<String>>,
    /// Attribute value index per entity.
    pub entity_attr: Vec<usize>,
    /// Relation keywords.
    pub relations: Vec<Vec<String>>,
    /// The attribute relation keyword ("is a" analogue).
    pub attr_word: Vec<String>,
    pub fillers_common: Vec<Vec<String>>,
    pub fillers_heldout: Vec<Vec<String>>,
    pub facts: Vec<Fact>,
}

const N_ATTR_VALUES: usize = 8;
const N_FILLERS_COMMON: usize = 8;
const N_FILLERS_HELDOUT: usize = 4;

fn gen_word(rng: &mut ChaCha8Rng, consonants: &[char], taken: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = 2 + (rng.random::<u32>() % 2) as usize;
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(consonants[(rng.random::<u32>() as usize) % consonants.len()]);
            w.push(VOWELS[(rng.random::<u32>() as usize) % VOWELS.len()]);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn gen_lexicon(rng: &mut ChaCha8Rng, consonants: &[char], n: usize) -> Vec<String> {
    let mut taken = BTreeSet::new();
    (0..n).map(|_| gen_word(rng, consonants, &mut taken)).collect()
}

impl FactWorld {
    pub fn lang_index(&self, lang: &str) -> Result<usize> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::Invalid(format!("unknown language '{lang}'")))
    }

    fn prompt(&self, lang: usize, fact: &Fact) -> String {
        format!("{} {}", self.entities[fact.subject][lang], self.relations[fact.relation][lang])
    }

    fn statement(&self, lang: usize, fact: &Fact) -> String {
        format!("{} {}", self.prompt(lang, fact), self.entities[fact.object][lang])
    }

    /// Training corpus for one language: every fact verbalized plain and with
    /// filler variants, plus every entity's attribute statement.
    pub fn train_corpus(&self, lang: &str, n_variants: usize, seed: u64) -> Result<Vec<String>> {
        let li = self.lang_index(lang)?;
        let mut rng = seeds::rng(seed, "train-corpus", li as u64);
        let all_fillers: Vec<&String> =
            self.fillers_common[li].iter().chain(&self.fillers_heldout[li]).collect();
        let mut out = Vec::new();
        for fact in &self.facts {
            out.push(self.statement(li, fact));
            for _ in 0..n_variants {
                let pre = all_fillers[(rng.random::<u32>() as usize) % all_fillers.len()];
                let with_mid = rng.random::<u32>() % 2 == 0;
                let subject = &self.entities[fact.subject][li];
                let rel = &self.relations[fact.relation][li];
                let object = &self.entities[fact.object][li];
                let line = if with_mid {
                    let mid = all_fillers[(rng.random::<u32>() as usize) % all_fillers.len()];
                    format!("{pre} {subject} {mid} {rel} {object}")
                } else {
                    format!("{pre} {subject} {rel} {object}")
                };
                out.push(line);
            }
        }
        for (e, &attr) in self.entity_attr.iter().enumerate() {
            out.push(format!(
                "{} {} {}",
                self.entities[e][li], self.attr_word[li], self.attr_values[attr][li]
            ));
        }
        Ok(out)
    }

    /// Template paraphrases of a prompt: distinct filler arrangements around
    /// the subject that keep the relation phrase intact. Never returns the
    /// prompt itself; errors when `n` exceeds the number of distinct
    /// arrangements.
    pub fn gen_paraphrases_template(
        &self,
        lang: &str,
        prompt: &str,
        subject: &str,
        n: usize,
        seed: u64,
    ) -> Result<Vec<String>> {
        let li = self.lang_index(lang)?;
        if n == 0 {
            return Err(Error::Invalid("paraphrase count must be at least 1".into()));
        }
        let rest = prompt
            .strip_prefix(subject)
            .map(str::trim)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::SubjectNotFound {
                subject: subject.to_string(),
                prompt: prompt.to_string(),
            })?;
        let fillers = &self.fillers_common[li];
        let mut combos = Vec::new();
        let mut slots: Vec<Option<&String>> = vec![None];
        slots.extend(fillers.iter().map(Some));
        for pre in &slots {
            for mid in &slots {
                if pre.is_none() && mid.is_none() {
                    continue; // identical to the prompt
                }
                let mut s = String::new();
                if let Some(p) = pre {
                    s.push_str(p);
                    s.push(' ');
                }
                s.push_str(subject);
                s.push(' ');
                if let Some(m) = mid {
                    s.push_str(m);
                    s.push(' ');
                }
                s.push_str(rest);
                combos.push(s);
            }
        }
        if n > combos.len() {
            return Err(Error::Invalid(format!(
                "requested {n} paraphrases but only {} distinct templates exist",
                combos.len()
            )));
        }
        let mut rng = seeds::rng(seed, "paraphrase", li as u64);
        combos.shuffle(&mut rng);
        combos.truncate(n);
        Ok(combos)
    }

    fn rephrases(
        &self,
        li: usize,
        subject: &str,
        rel: &str,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<String>> {
        // Every rephrase leads with a held-out filler, which locating
        // paraphrases never use, so the two template sets stay disjoint.
        let held = &self.fillers_heldout[li];
        let mut combos = Vec::new();
        for pre in held {
            combos.push(format!("{pre} {subject} {rel}"));
            for mid in held {
                combos.push(format!("{pre} {subject} {mid} {rel}"));
            }
        }
        if n > combos.len() {
            return Err(Error::Invalid(format!(
                "requested {n} rephrasings but only {} held-out templates exist",
                combos.len()
            )));
        }
        combos.shuffle(rng);
        combos.truncate(n);
        Ok(combos)
    }
}

/// Generate a deterministic fact world, its per-language training corpora,
/// and counterfactual edit groups.
pub fn gen_synthetic_world(cfg: &WorldCfg) -> Result<(FactWorld, Vec<Vec<String>>, Vec<EditGroup>)> {
    if cfg.n_entities < 2 || cfg.n_relations == 0 || cfg.n_facts == 0 {
        return Err(Error::Invalid("world needs at least 2 entities, 1 relation, 1 fact".into()));
    }
    if cfg.n_facts > cfg.n_entities * cfg.n_relations {
        return Err(Error::Invalid(format!(
            "{} facts cannot fit {} entity-relation pairs",
            cfg.n_facts,
            cfg.n_entities * cfg.n_relations
        )));
    }

    let words_needed = cfg.n_entities + N_ATTR_VALUES + cfg.n_relations + 1 + N_FILLERS_COMMON
        + N_FILLERS_HELDOUT;
    let mut lexicons = Vec::new();
    for (li, consonants) in [L1_CONSONANTS, L2_CONSONANTS].iter().enumerate() {
        let mut rng = seeds::rng(cfg.seed, "lexicon", li as u64);
        lexicons.push(gen_lexicon(&mut rng, consonants, words_needed));
    }
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Vec<Vec<String>> {
        let out = (cursor..cursor + n)
            .map(|i| lexicons.iter().map(|lex| lex[i].clone()).collect())
            .collect();
        cursor += n;
        out
    };
    let entities = take(cfg.n_entities);
    let attr_values = take(N_ATTR_VALUES);
    let relations = take(cfg.n_relations);
    let attr_word = take(1).remove(0);
    let fillers: Vec<Vec<String>> = take(N_FILLERS_COMMON + N_FILLERS_HELDOUT);
    let per_lang = |range: core::ops::Range<usize>| -> Vec<Vec<String>> {
        (0..2).map(|li| fillers[range.clone()].iter().map(|w| w[li].clone()).collect()).collect()
    };
    let fillers_common = per_lang(0..N_FILLERS_COMMON);
    let fillers_heldout = per_lang(N_FILLERS_COMMON..N_FILLERS_COMMON + N_FILLERS_HELDOUT);

    let mut rng = seeds::rng(cfg.seed, "facts", 0);
    let mut pairs: Vec<(usize, usize)> = (0..cfg.n_entities)
        .flat_map(|s| (0..cfg.n_relations).map(move |r| (s, r)))
        .collect();
    pairs.shuffle(&mut rng);
    let facts: Vec<Fact> = pairs[..cfg.n_facts]
        .iter()
        .map(|&(s, r)| {
            let mut o = (rng.random::<u32>() as usize) % cfg.n_entities;
            if o == s {
                o = (o + 1) % cfg.n_entities;
            }
            Fact { subject: s, relation: r, object: o }
        })
        .collect();
    let entity_attr: Vec<usize> =
        (0..cfg.n_entities).map(|_| (rng.random::<u32>() as usize) % N_ATTR_VALUES).collect();

    let world = FactWorld {
        langs: LANGS.iter().map(|s| s.to_string()).collect(),
        entities,
        attr_values,
        entity_attr,
        relations,
        attr_word,
        fillers_common,
        fillers_heldout,
        facts,
    };

    let corpora: Vec<Vec<String>> = world
        .langs
        .clone()
        .iter()
        .map(|l| world.train_corpus(l, cfg.n_train_variants, cfg.seed))
        .collect::<Result<_>>()?;

    let groups = gen_edit_groups(&world, cfg)?;
    Ok((world, corpora, groups))
}

fn gen_edit_groups(world: &FactWorld, cfg: &WorldCfg) -> Result<Vec<EditGroup>> {
    let mut rng = seeds::rng(cfg.seed, "edit-groups", 0);
    let mut order: Vec<usize> = (0..world.facts.len()).collect();
    order.shuffle(&mut rng);

    // Edited facts need pairwise-distinct subjects so cache keys never
    // collide within one experiment.
    let mut edit_facts = Vec::new();
    let mut edit_subjects = BTreeSet::new();
    for &fi in &order {
        if edit_facts.len() == cfg.n_edit_groups {
            break;
        }
        if edit_subjects.insert(world.facts[fi].subject) {
            edit_facts.push(fi);
        }
    }
    if edit_facts.len() < cfg.n_edit_groups {
        return Err(Error::Invalid(format!(
            "only {} distinct subjects available for {} edit groups",
            edit_facts.len(),
            cfg.n_edit_groups
        )));
    }
    let locality_pool: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&fi| !edit_subjects.contains(&world.facts[fi].subject))
        .collect();
    if locality_pool.is_empty() {
        return Err(Error::Invalid(
            "no facts with unedited subjects left for locality prompts".into(),
        ));
    }

    let mut groups = Vec::with_capacity(cfg.n_edit_groups);
    for (gi, &fi) in edit_facts.iter().enumerate() {
        let fact = &world.facts[fi];
        // Counterfactual object, aligned across languages.
        let mut o_new = (rng.random::<u32>() as usize) % world.entities.len();
        while o_new == fact.object || o_new == fact.subject {
            o_new = (o_new + 1) % world.entities.len();
        }
        let loc_fact = &world.facts[locality_pool[gi % locality_pool.len()]];

        let mut group = EditGroup { id: format!("g{gi:03}"), ..Default::default() };
        for (li, lang) in world.langs.iter().enumerate() {
            let subject = world.entities[fact.subject][li].clone();
            let rel = world.relations[fact.relation][li].clone();
            let prompt = world.prompt(li, fact);
            let rephrase_prompts =
                world.rephrases(li, &subject, &rel, cfg.n_rephrases, &mut rng)?;
            let paraphrases = world.gen_paraphrases_template(
                lang,
                &prompt,
                &subject,
                cfg.n_paraphrases,
                seeds::derive(cfg.seed, "group-para", gi as u64),
            )?;
            group.langs.insert(
                lang.clone(),
                LangEntry {
                    subject: subject.clone(),
                    prompt,
                    target_new: world.entities[o_new][li].clone(),
                    rephrase_prompts,
                    locality: PromptAnswer {
                        prompt: world.prompt(li, loc_fact),
                        answer: world.entities[loc_fact.object][li].clone(),
                    },
                    portability: PromptAnswer {
                        prompt: format!(
                            "{} {} {}",
                            subject, rel, world.attr_word[li]
                        ),
                        answer: world.attr_values[world.entity_attr[o_new]][li].clone(),
                    },
                    paraphrases,
                    probe: Some(format!("{} {}", subject, world.attr_word[li])),
                },
            );
        }
        groups.push(group);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{contains_token_subsequence, validate_groups};

    fn small_cfg() -> WorldCfg {
        WorldCfg {
            n_entities: 12,
            n_relations: 4,
            n_facts: 30,
            n_edit_groups: 5,
            n_rephrases: 3,
            n_paraphrases: 10,
            n_train_variants: 2,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (w1, c1, g1) = gen_synthetic_world(&small_cfg()).unwrap();
        let (w2, c2, g2) = gen_synthetic_world(&small_cfg()).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(c1, c2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn surface_lexicons_are_disjoint() {
        let (_, corpora, _) = gen_synthetic_world(&small_cfg()).unwrap();
        let tokens = |lines: &Vec<String>| -> BTreeSet<String> {
            lines.iter().flat_map(|l| l.split_whitespace().map(|t| t.to_string())).collect()
        };
        let t1 = tokens(&corpora[0]);
        let t2 = tokens(&corpora[1]);
        assert!(t1.is_disjoint(&t2), "shared tokens: {:?}", t1.intersection(&t2).take(5));
    }

    #[test]
    fn full_pair_coverage_when_facts_saturate() {
        let cfg = WorldCfg {
            n_entities: 4,
            n_relations: 3,
            n_facts: 12,
            n_edit_groups: 2,
            ..small_cfg()
        };
        let (world, _, _) = gen_synthetic_world(&cfg).unwrap();
        let pairs: BTreeSet<(usize, usize)> =
            world.facts.iter().map(|f| (f.subject, f.relation)).collect();
        assert_eq!(pairs.len(), 12);
    }

    #[test]
    fn infeasible_counts_error() {
        let cfg = WorldCfg { n_entities: 2, n_relations: 2, n_facts: 5, ..small_cfg() };
        assert!(gen_synthetic_world(&cfg).is_err());
    }

    #[test]
    fn locality_subjects_disjoint_from_edited() {
        let (_, _, groups) = gen_synthetic_world(&small_cfg()).unwrap();
        let edited: BTreeSet<&str> =
            groups.iter().flat_map(|g| g.langs.values().map(|e| e.subject.as_str())).collect();
        for g in &groups {
            for e in g.langs.values() {
                let loc_subject = e.locality.prompt.split_whitespace().next().unwrap();
                assert!(!edited.contains(loc_subject), "locality subject {loc_subject} is edited");
            }
        }
    }

    #[test]
    fn counterfactual_targets_differ_from_current_objects() {
        let (world, _, groups) = gen_synthetic_world(&small_cfg()).unwrap();
        let originals: BTreeSet<String> = world
            .facts
            .iter()
            .flat_map(|f| (0..2).map(|li| format!("{}|{}", world.prompt(li, f), world.entities[f.object][li])))
            .collect();
        for g in &groups {
            for e in g.langs.values() {
                assert!(!originals.contains(&format!("{}|{}", e.prompt, e.target_new)));
            }
        }
    }

    #[test]
    fn groups_validate_and_rephrases_hold_out_templates() {
        let (_, _, groups) = gen_synthetic_world(&small_cfg()).unwrap();
        validate_groups(&groups).unwrap();
        for g in &groups {
            for e in g.langs.values() {
                assert_eq!(e.paraphrases.len(), 10);
                for p in &e.paraphrases {
                    assert!(contains_token_subsequence(p, &e.subject));
                    assert_ne!(p, &e.prompt);
                }
                let para: BTreeSet<&String> = e.paraphrases.iter().collect();
                for r in &e.rephrase_prompts {
                    assert!(contains_token_subsequence(r, &e.subject));
                    assert!(!para.contains(r), "rephrase {r} leaked into locating set");
                }
            }
        }
    }

    #[test]
    fn paraphrase_generator_contract() {
        let (world, _, groups) = gen_synthetic_world(&small_cfg()).unwrap();
        let e = &groups[0].langs["l1"];
        let one =
            world.gen_paraphrases_template("l1", &e.prompt, &e.subject, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_ne!(one[0], e.prompt);
        let many =
            world.gen_paraphrases_template("l1", &e.prompt, &e.subject, 10, 3).unwrap();
        let distinct: BTreeSet<&String> = many.iter().collect();
        assert_eq!(distinct.len(), 10);
        let err = world
            .gen_paraphrases_template("l1", &e.prompt, &e.subject, 10_000, 3)
            .unwrap_err();
        assert!(format!("{err}").contains("distinct templates"));
    }
}
