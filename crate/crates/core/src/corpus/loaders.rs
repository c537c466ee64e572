//! JSON Lines readers for the question-answer and dialogue corpora.

use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category names; a label's index is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        Ok(Self { names })
    }

    /// `topic0 .. topic{k-1}`, the names used by the synthetic generator.
    pub fn topics(k: usize) -> Self {
        Self {
            names: (0..k).map(|i| format!("topic{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub question: String,
    pub answer: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    pub turns: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QaLine {
    pub q: String,
    pub a: String,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DialogueLine {
    pub turns: Vec<String>,
}

/// Streaming reader over a JSON Lines file. Blank lines are skipped.
pub struct JsonlReader<T> {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    parse: T,
}

fn open(path: &Path) -> Result<Lines<BufReader<File>>> {
    Ok(BufReader::new(File::open(path)?).lines())
}

impl<T> JsonlReader<T> {
    fn invalid(&self, msg: impl Into<String>) -> Error {
        Error::Validation {
            path: self.path.clone(),
            line: self.line_no,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Option<Result<String>> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => return Some(Ok(l)),
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

pub type QaReader<'l> = JsonlReader<&'l LabelSet>;
pub type DialogueReader = JsonlReader<()>;

pub fn read_qa<'l>(path: &Path, labels: &'l LabelSet) -> Result<QaReader<'l>> {
    Ok(JsonlReader {
        path: path.to_path_buf(),
        lines: open(path)?,
        line_no: 0,
        parse: labels,
    })
}

pub fn read_dialogue(path: &Path) -> Result<DialogueReader> {
    Ok(JsonlReader {
        path: path.to_path_buf(),
        lines: open(path)?,
        line_no: 0,
        parse: (),
    })
}

impl Iterator for JsonlReader<&LabelSet> {
    type Item = Result<QaExample>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.next_line()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let rec: QaLine = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => return Some(Err(self.invalid(e.to_string()))),
        };
        if rec.q.is_empty() || rec.a.is_empty() {
            return Some(Err(self.invalid("empty question or answer")));
        }
        let Some(label) = self.parse.index(&rec.label) else {
            return Some(Err(self.invalid(format!("unknown label {:?}", rec.label))));
        };
        Some(Ok(QaExample {
            question: rec.q,
            answer: rec.a,
            label,
        }))
    }
}

impl Iterator for JsonlReader<()> {
    type Item = Result<DialogueExample>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.next_line()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let rec: DialogueLine = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => return Some(Err(self.invalid(e.to_string()))),
        };
        if rec.turns.len() < 2 {
            return Some(Err(self.invalid("a dialogue needs at least two turns")));
        }
        if let Some(i) = rec.turns.iter().position(String::is_empty) {
            return Some(Err(self.invalid(format!("turn {i} is empty"))));
        }
        Some(Ok(DialogueExample { turns: rec.turns }))
    }
}

pub fn load_qa(path: &Path, labels: &LabelSet) -> Result<Vec<QaExample>> {
    read_qa(path, labels)?.collect()
}

pub fn load_dialogue(path: &Path) -> Result<Vec<DialogueExample>> {
    read_dialogue(path)?.collect()
}

pub fn qa_to_jsonl(examples: &[QaExample], labels: &LabelSet) -> String {
    let mut s = String::new();
    for ex in examples {
        let line = QaLine {
            q: ex.question.clone(),
            a: ex.answer.clone(),
            label: labels.name(ex.label).to_string(),
        };
        s.push_str(&serde_json::to_string(&line).expect("plain strings serialize"));
        s.push('\n');
    }
    s
}

pub fn dialogue_to_jsonl(dialogues: &[DialogueExample]) -> String {
    let mut s = String::new();
    for d in dialogues {
        let line = DialogueLine {
            turns: d.turns.clone(),
        };
        s.push_str(&serde_json::to_string(&line).expect("plain strings serialize"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn qa_lines_in_order() {
        let labels = LabelSet::topics(3);
        let f = file(
            "{\"q\":\"x?\",\"a\":\"y\",\"label\":\"topic0\"}\n\
             {\"q\":\"u?\",\"a\":\"v\",\"label\":\"topic2\"}\n\n\
             {\"q\":\"s?\",\"a\":\"t\",\"label\":\"topic1\"}\n",
        );
        let qa = load_qa(f.path(), &labels).unwrap();
        assert_eq!(qa.len(), 3);
        assert_eq!(qa[1].question, "u?");
        assert_eq!(
            qa.iter().map(|e| e.label).collect::<Vec<_>>(),
            vec![0, 2, 1]
        );
    }

    #[test]
    fn qa_errors_name_the_line() {
        let labels = LabelSet::topics(2);
        let f = file(
            "{\"q\":\"x\",\"a\":\"y\",\"label\":\"topic0\"}\n{\"q\":\"x\",\"label\":\"topic0\"}\n",
        );
        match load_qa(f.path(), &labels) {
            Err(Error::Validation { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("`a`"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = file("{\"q\":\"x\",\"a\":\"y\",\"label\":\"sports\"}\n");
        assert!(matches!(
            load_qa(f.path(), &labels),
            Err(Error::Validation { line: 1, .. })
        ));
        let f = file("{\"q\":\"\",\"a\":\"y\",\"label\":\"topic1\"}\n");
        assert!(matches!(
            load_qa(f.path(), &labels),
            Err(Error::Validation { line: 1, .. })
        ));
    }

    #[test]
    fn dialogue_lines() {
        let f = file("{\"turns\":[\"a\",\"b\",\"c\",\"d\"]}\n");
        let d = load_dialogue(f.path()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].turns.len(), 4);
        let f = file("{\"turns\":[\"a\",\"\"]}\n");
        assert!(matches!(
            load_dialogue(f.path()),
            Err(Error::Validation { line: 1, .. })
        ));
        let f = file("{\"turns\":[\"a\"]}\n");
        assert!(load_dialogue(f.path()).is_err());
    }

    #[test]
    fn jsonl_writers_round_trip() {
        let labels = LabelSet::topics(2);
        let qa = vec![QaExample {
            question: "q\"1".into(),
            answer: "a".into(),
            label: 1,
        }];
        let f = file(&qa_to_jsonl(&qa, &labels));
        assert_eq!(load_qa(f.path(), &labels).unwrap(), qa);
        let d = vec![DialogueExample {
            turns: vec!["x".into(), "y".into()],
        }];
        let f = file(&dialogue_to_jsonl(&d));
        assert_eq!(load_dialogue(f.path()).unwrap(), d);
    }
}
