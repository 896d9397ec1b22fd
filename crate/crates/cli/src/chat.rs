//! Line-oriented chat with a trained model. Plain words become tokens;
//! `#red`-style tags attach the codebook image of that attribute.

use std::collections::VecDeque;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mmdial::data::{Speaker, SyntheticWorld, Utterance, Vocabulary, EOS, UNK, WORLD_FILE};
use mmdial::train::{peek_precision, Precision, Trainer};
use mmdial::{Model, Scalar};

use crate::ChatArgs;

const HELP: &str = "type a message; #attribute adds an image, /reset clears the context, /quit exits";

pub fn run(a: ChatArgs) -> Result<ExitCode> {
    let world = match &a.data {
        Some(dir) => Some(
            SyntheticWorld::load(dir.join(WORLD_FILE))
                .with_context(|| format!("reading world from {}", dir.display()))?,
        ),
        None => None,
    };
    let stdin = io::stdin();
    match peek_precision(&a.checkpoint)? {
        Precision::F64 => chat_with::<f64>(&a.checkpoint, world.as_ref(), stdin.lock(), io::stdout().lock()),
        Precision::F32 => chat_with::<f32>(&a.checkpoint, world.as_ref(), stdin.lock(), io::stdout().lock()),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn chat_with<T: Scalar>(path: &Path, world: Option<&SyntheticWorld>, input: impl BufRead, out: impl Write) -> Result<()> {
    let trainer = Trainer::<T>::load(path).with_context(|| format!("loading {}", path.display()))?;
    let vocab = match trainer.vocab().cloned().or_else(|| world.map(|w| w.vocab.clone())) {
        Some(v) => v,
        None => bail!("checkpoint has no vocabulary; pass --data with the corpus directory"),
    };
    session(trainer.model(), vocab, world, input, out)
}

/// Splits a line into token ids and tagged image features.
fn parse_line(line: &str, vocab: &Vocabulary, world: Option<&SyntheticWorld>, d_img: usize) -> Utterance {
    let mut tokens = Vec::new();
    let mut images = Vec::new();
    for word in line.split_whitespace() {
        if let Some(tag) = word.strip_prefix('#') {
            match world.and_then(|w| w.attribute_feature(tag)) {
                Some(f) if f.len() == d_img => images.push(f.to_vec()),
                Some(_) => warn!("image width of #{tag} does not match the model"),
                None => warn!("unknown attribute tag #{tag}"),
            }
            continue;
        }
        tokens.push(vocab.id(word).unwrap_or_else(|| {
            warn!("unknown word {word:?}");
            UNK
        }));
    }
    Utterance::new(Speaker::User, tokens, images)
}

fn session<T: Scalar>(
    model: &Model<T>,
    vocab: Vocabulary,
    world: Option<&SyntheticWorld>,
    mut input: impl BufRead,
    mut out: impl Write,
) -> Result<()> {
    let c = model.config();
    if vocab.len() != c.vocab_size {
        bail!("vocabulary has {} tokens but the model expects {}", vocab.len(), c.vocab_size);
    }
    writeln!(out, "{HELP}")?;
    let mut context: VecDeque<Utterance> = VecDeque::new();
    let mut line = String::new();
    loop {
        write!(out, "> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" | "/exit" => break,
            "/reset" => {
                context.clear();
                writeln!(out, "(context cleared)")?;
                continue;
            }
            "/help" => {
                writeln!(out, "{HELP}")?;
                continue;
            }
            _ => {}
        }
        let query = parse_line(text, &vocab, world, c.d_img);
        if query.tokens.is_empty() && query.image_features.is_empty() {
            writeln!(out, "(nothing to say)")?;
            continue;
        }
        if context.is_empty() {
            info!("empty context: the learned history parameter H seeds H_0");
        }
        let turns: Vec<&Utterance> = context.iter().chain(std::iter::once(&query)).collect();
        let views: Vec<_> = turns.iter().map(|u| u.view()).collect();
        let reply = model.generate_greedy(&views, c.max_len)?;
        writeln!(out, "bot: {}", vocab.decode(&reply))?;
        context.push_back(query);
        let spoken: Vec<u32> = reply.into_iter().filter(|&t| t != EOS).collect();
        if !spoken.is_empty() {
            context.push_back(Utterance::new(Speaker::System, spoken, Vec::new()));
        }
        while context.len() > c.context_size {
            context.pop_front();
        }
    }
    Ok(())
}
