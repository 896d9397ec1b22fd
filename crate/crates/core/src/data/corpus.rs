use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::EOS;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

/// One dialogue turn: token ids plus zero or more image feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub image_features: Vec<Vec<f64>>,
}

impl Utterance {
    pub fn new(speaker: Speaker, tokens: Vec<u32>, image_features: Vec<Vec<f64>>) -> Self {
        Utterance {
            speaker,
            tokens,
            image_features,
        }
    }

    pub fn view(&self) -> UtteranceView<'_> {
        UtteranceView {
            tokens: &self.tokens,
            text_mask: None,
            images: &self.image_features,
            image_mask: None,
        }
    }
}

/// Borrowed utterance as seen by the encoder. Masks, when present, mark
/// real (non-padding) positions; absent masks mean everything is real.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceView<'a> {
    pub tokens: &'a [u32],
    pub text_mask: Option<&'a [bool]>,
    pub images: &'a [Vec<f64>],
    pub image_mask: Option<&'a [bool]>,
}

/// Context turns (oldest first), the user query and the gold response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub id: u64,
    pub context: Vec<Utterance>,
    pub query: Utterance,
    /// Response token ids, ending with EOS and without a leading BOS.
    pub response: Vec<u32>,
    /// True when the context window reaches back to the start of the
    /// conversation.
    pub conversation_start: bool,
}

impl DialogueSample {
    /// Context followed by the query, oldest first.
    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.context.iter().chain(std::iter::once(&self.query))
    }

    pub fn validate(&self) -> Result<()> {
        if self.response.last() != Some(&EOS) {
            return Err(Error::data(format!("sample {}: response must end with EOS", self.id)));
        }
        for u in self.utterances() {
            let d = u.image_features.first().map_or(0, Vec::len);
            if u.image_features.iter().any(|f| f.len() != d || f.iter().any(|x| !x.is_finite())) {
                return Err(Error::data(format!("sample {}: bad image features", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: u32,
    #[serde(flatten)]
    sample: DialogueSample,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Valid => "valid.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split `{other}`"))),
        }
    }
}

/// Writes one JSON record per line.
pub fn write_corpus<W: Write>(writer: W, samples: &[DialogueSample]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for s in samples {
        let record = Record {
            version: FORMAT_VERSION,
            sample: s.clone(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: Read>(reader: R) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let probe: VersionProbe = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if probe.version != FORMAT_VERSION {
            return Err(Error::Parse {
                line: lineno,
                message: format!("unsupported record version {}", probe.version),
            });
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        record.sample.validate().map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(record.sample);
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, samples: &[DialogueSample]) -> Result<()> {
    write_corpus(File::create(path)?, samples)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<DialogueSample>> {
    read_corpus(File::open(path)?)
}

/// A corpus split into train/valid/test.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<DialogueSample>,
    pub valid: Vec<DialogueSample>,
    pub test: Vec<DialogueSample>,
}

impl CorpusSplits {
    pub fn get(&self, split: Split) -> &[DialogueSample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for split in Split::ALL {
            save_corpus(dir.join(split.file_name()), self.get(split))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(CorpusSplits {
            train: load_corpus(dir.join(Split::Train.file_name()))?,
            valid: load_corpus(dir.join(Split::Valid.file_name()))?,
            test: load_corpus(dir.join(Split::Test.file_name()))?,
        })
    }
}
