//! Synthetic fact corpora, knowledge-retention questions, and splits.
//!
//! Every document is one four-token sentence `subject relation object .`.
//! A question asks whether the model prefers the true `object .` over the
//! object of some other fact after the `subject relation` context.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tinylm::PAD;

pub const PAD_TOKEN: &str = "<pad>";
pub const END_TOKEN: &str = ".";
pub const RELATIONS: [&str; 4] = ["likes", "owns", "visits", "fears"];

pub type Document = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolTable {
    /// A table holding only the padding symbol, at id 0.
    pub fn new() -> Self {
        let mut table = SymbolTable {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        table.intern(PAD_TOKEN);
        table
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn decode(&self, doc: &[usize]) -> Result<String> {
        let words = doc
            .iter()
            .map(|&t| {
                self.token(t).ok_or(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// `token<TAB>id` lines, in id order.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{tok}\t{id}")?;
        }
        Ok(())
    }
}

impl Default for SymbolTable {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

impl Fact {
    pub fn document(&self, end: usize) -> Document {
        vec![self.subject, self.relation, self.object, end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KrQuestion {
    pub context: Vec<usize>,
    pub true_continuation: Vec<usize>,
    pub false_continuation: Vec<usize>,
}

impl KrQuestion {
    /// The same question with its answers exchanged.
    pub fn swapped(&self) -> Self {
        KrQuestion {
            context: self.context.clone(),
            true_continuation: self.false_continuation.clone(),
            false_continuation: self.true_continuation.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactCorpus {
    pub symbols: SymbolTable,
    pub facts: Vec<Fact>,
    pub documents: Vec<Document>,
    /// One question per fact, aligned with `facts` and `documents`.
    pub questions: Vec<KrQuestion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusConfig {
    pub n_facts: usize,
    pub n_subjects: usize,
    pub n_objects: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_facts: 200,
            n_subjects: 200,
            n_objects: 50,
        }
    }
}

/// Builds `n_facts` facts with distinct subjects, a uniform relation, and a
/// uniform object. The false answer of each question is the object of a
/// uniformly chosen other fact with a different object, or an unused object
/// when every fact shares the same one.
pub fn make_fact_corpus(n_facts: usize, n_subjects: usize, n_objects: usize, rng: &mut RngStream) -> Result<FactCorpus> {
    if n_facts == 0 {
        return Err(Error::invalid("n_facts", "must be >= 1"));
    }
    if n_subjects < n_facts {
        return Err(Error::invalid(
            "n_subjects",
            format!("need at least one subject per fact ({n_subjects} < {n_facts})"),
        ));
    }
    if n_objects < 2 {
        return Err(Error::invalid("n_objects", "need at least 2 objects for a false answer"));
    }

    let mut symbols = SymbolTable::new();
    let end = symbols.intern(END_TOKEN);
    let relations: Vec<usize> = RELATIONS.iter().map(|r| symbols.intern(r)).collect();
    let sw = digits(n_subjects);
    let subjects: Vec<usize> = (0..n_subjects).map(|i| symbols.intern(&format!("s{i:0sw$}"))).collect();
    let ow = digits(n_objects);
    let objects: Vec<usize> = (0..n_objects).map(|i| symbols.intern(&format!("o{i:0ow$}"))).collect();

    let mut subject_order = subjects.clone();
    rng.shuffle(&mut subject_order);
    let facts: Vec<Fact> = subject_order[..n_facts]
        .iter()
        .map(|&subject| Fact {
            subject,
            relation: relations[rng.below(relations.len())],
            object: objects[rng.below(n_objects)],
        })
        .collect();

    let questions = facts
        .iter()
        .map(|fact| {
            let others: Vec<usize> = facts.iter().map(|f| f.object).filter(|&o| o != fact.object).collect();
            let false_object = if others.is_empty() {
                let unused: Vec<usize> = objects.iter().copied().filter(|&o| o != fact.object).collect();
                unused[rng.below(unused.len())]
            } else {
                others[rng.below(others.len())]
            };
            KrQuestion {
                context: vec![fact.subject, fact.relation],
                true_continuation: vec![fact.object, end],
                false_continuation: vec![false_object, end],
            }
        })
        .collect();

    let documents = facts.iter().map(|f| f.document(end)).collect();
    Ok(FactCorpus {
        symbols,
        facts,
        documents,
        questions,
    })
}

fn digits(n: usize) -> usize {
    (n.max(2) - 1).to_string().len()
}

/// A slice of the corpus and the questions about its facts. `generation`
/// counts how many times the documents have been rewritten by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub index: usize,
    pub generation: usize,
    pub documents: Vec<Document>,
    pub questions: Vec<KrQuestion>,
}

/// Partitions the corpus, in order, into `stages + 1` contiguous splits
/// whose sizes differ by at most one (larger splits first).
pub fn make_splits(corpus: &FactCorpus, stages: usize) -> Result<Vec<Split>> {
    let n = corpus.documents.len();
    let n_splits = stages + 1;
    if n_splits > n {
        return Err(Error::invalid(
            "stages",
            format!("{n_splits} splits need at least as many documents, got {n}"),
        ));
    }
    let base = n / n_splits;
    let extra = n % n_splits;
    let mut start = 0;
    Ok((0..n_splits)
        .map(|index| {
            let len = base + usize::from(index < extra);
            let range = start..start + len;
            start += len;
            Split {
                index,
                generation: 0,
                documents: corpus.documents[range.clone()].to_vec(),
                questions: corpus.questions[range].to_vec(),
            }
        })
        .collect())
}

/// One sentence per line, tokens separated by spaces.
pub fn write_corpus_text<W: Write>(symbols: &SymbolTable, docs: &[Document], mut out: W) -> Result<()> {
    for doc in docs {
        writeln!(out, "{}", symbols.decode(doc)?)?;
    }
    Ok(())
}

fn ids(tokens: &[usize]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{t}").expect("writing to a String");
    }
    s
}

/// `context<TAB>true<TAB>false`, each a space-separated list of token ids.
pub fn write_questions_tsv<W: Write>(questions: &[KrQuestion], mut out: W) -> Result<()> {
    for q in questions {
        writeln!(
            out,
            "{}\t{}\t{}",
            ids(&q.context),
            ids(&q.true_continuation),
            ids(&q.false_continuation)
        )?;
    }
    Ok(())
}

pub fn read_questions_tsv<R: BufRead>(input: R) -> Result<Vec<KrQuestion>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |field: &str| -> Result<Vec<usize>> {
            field
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::invalid("questions", format!("line {}: bad token id `{t}`", lineno + 1)))
                })
                .collect()
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::invalid(
                "questions",
                format!("line {}: expected 3 tab-separated fields, got {}", lineno + 1, fields.len()),
            ));
        }
        out.push(KrQuestion {
            context: parse(fields[0])?,
            true_continuation: parse(fields[1])?,
            false_continuation: parse(fields[2])?,
        });
    }
    Ok(out)
}

/// Keeps the padding id out of corpus documents.
pub fn check_documents(docs: &[Document]) -> Result<()> {
    if docs.iter().flatten().any(|&t| t == PAD) {
        return Err(Error::invalid("documents", "padding id appears inside a document"));
    }
    Ok(())
}
