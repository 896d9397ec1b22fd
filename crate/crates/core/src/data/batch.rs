use super::corpus::{DialogueSample, Speaker, Utterance, UtteranceView};
use super::vocab::PAD;
use crate::error::{Error, Result};

/// One utterance slot across a batch, right-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedUtterances {
    /// `B × L` token ids, PAD-filled.
    pub tokens: Vec<Vec<u32>>,
    pub text_mask: Vec<Vec<bool>>,
    /// `B × N × d_img`, zero-filled.
    pub images: Vec<Vec<Vec<f64>>>,
    pub image_mask: Vec<Vec<bool>>,
    /// `None` where the sample has no utterance in this slot.
    pub speaker: Vec<Option<Speaker>>,
}

impl PaddedUtterances {
    fn build(slot: &[Option<&Utterance>], max_len: usize, max_images: usize, keep_tail: bool) -> Self {
        let clip = |u: &Utterance| -> Vec<u32> {
            let t = &u.tokens;
            if t.len() <= max_len {
                t.clone()
            } else {
                log::warn!("truncating a {}-token utterance to {max_len}", t.len());
                if keep_tail {
                    t[t.len() - max_len..].to_vec()
                } else {
                    t[..max_len].to_vec()
                }
            }
        };
        let clip_images = |u: &Utterance| -> Vec<Vec<f64>> {
            if u.image_features.len() > max_images {
                log::warn!("dropping {} images beyond {max_images}", u.image_features.len() - max_images);
            }
            u.image_features.iter().take(max_images).cloned().collect()
        };
        let toks: Vec<Vec<u32>> = slot.iter().map(|u| u.map(clip).unwrap_or_default()).collect();
        let imgs: Vec<Vec<Vec<f64>>> = slot.iter().map(|u| u.map(clip_images).unwrap_or_default()).collect();
        let len = toks.iter().map(Vec::len).max().unwrap_or(0);
        let n_img = imgs.iter().map(Vec::len).max().unwrap_or(0);
        let d_img = imgs.iter().flatten().map(Vec::len).next().unwrap_or(0);

        let mut out = PaddedUtterances {
            tokens: Vec::with_capacity(slot.len()),
            text_mask: Vec::with_capacity(slot.len()),
            images: Vec::with_capacity(slot.len()),
            image_mask: Vec::with_capacity(slot.len()),
            speaker: slot.iter().map(|u| u.map(|u| u.speaker)).collect(),
        };
        for (t, im) in toks.into_iter().zip(imgs) {
            let real = t.len();
            let mut row = t;
            row.resize(len, PAD);
            out.tokens.push(row);
            out.text_mask.push((0..len).map(|j| j < real).collect());
            let real_img = im.len();
            let mut im = im;
            im.resize(n_img, vec![0.0; d_img]);
            out.images.push(im);
            out.image_mask.push((0..n_img).map(|j| j < real_img).collect());
        }
        out
    }

    pub fn view(&self, i: usize) -> UtteranceView<'_> {
        UtteranceView {
            tokens: &self.tokens[i],
            text_mask: Some(&self.text_mask[i]),
            images: &self.images[i],
            image_mask: Some(&self.image_mask[i]),
        }
    }

    fn unpad(&self, i: usize) -> Option<Utterance> {
        let speaker = self.speaker[i]?;
        let tokens = self.tokens[i]
            .iter()
            .zip(&self.text_mask[i])
            .filter_map(|(&t, &m)| m.then_some(t))
            .collect();
        let images = self.images[i]
            .iter()
            .zip(&self.image_mask[i])
            .filter_map(|(f, &m)| m.then(|| f.clone()))
            .collect();
        Some(Utterance::new(speaker, tokens, images))
    }
}

/// A padded batch of dialogue samples. Context slot `j` holds every
/// sample's `j`-th context turn (oldest first).
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<u64>,
    pub context: Vec<PaddedUtterances>,
    pub query: PaddedUtterances,
    pub response: Vec<Vec<u32>>,
    pub response_mask: Vec<Vec<bool>>,
    pub conversation_start: Vec<bool>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Encoder views of sample `i`: its present context turns, then the query.
    pub fn utterance_views(&self, i: usize) -> Vec<UtteranceView<'_>> {
        self.context
            .iter()
            .filter(|slot| slot.speaker[i].is_some())
            .map(|slot| slot.view(i))
            .chain(std::iter::once(self.query.view(i)))
            .collect()
    }
}

/// Pads a batch to its longest members. Over-long context and query texts
/// keep their tail, over-long responses keep their head.
pub fn batch_and_pad(samples: &[DialogueSample], max_len: usize, max_images: usize) -> Result<PaddedBatch> {
    if samples.is_empty() {
        return Err(Error::contract("cannot batch an empty set of samples"));
    }
    let n_slots = samples.iter().map(|s| s.context.len()).max().unwrap_or(0);
    let context = (0..n_slots)
        .map(|j| {
            let slot: Vec<Option<&Utterance>> = samples.iter().map(|s| s.context.get(j)).collect();
            PaddedUtterances::build(&slot, max_len, max_images, true)
        })
        .collect();
    let queries: Vec<Option<&Utterance>> = samples.iter().map(|s| Some(&s.query)).collect();
    let query = PaddedUtterances::build(&queries, max_len, max_images, true);

    let responses: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| {
            if s.response.len() > max_len {
                log::warn!("truncating a {}-token response to {max_len}", s.response.len());
            }
            s.response.iter().take(max_len).copied().collect()
        })
        .collect();
    let len = responses.iter().map(Vec::len).max().unwrap_or(0);
    let response_mask = responses.iter().map(|r| (0..len).map(|j| j < r.len()).collect()).collect();
    let response = responses
        .into_iter()
        .map(|mut r| {
            r.resize(len, PAD);
            r
        })
        .collect();

    Ok(PaddedBatch {
        ids: samples.iter().map(|s| s.id).collect(),
        context,
        query,
        response,
        response_mask,
        conversation_start: samples.iter().map(|s| s.conversation_start).collect(),
    })
}

/// Applies the batch truncation rules to a single sample.
pub fn clip_sample(sample: &DialogueSample, max_len: usize, max_images: usize) -> Result<DialogueSample> {
    let b = batch_and_pad(std::slice::from_ref(sample), max_len, max_images)?;
    Ok(unbatch(&b).remove(0))
}

/// Inverse of [`batch_and_pad`] for samples that needed no truncation.
pub fn unbatch(batch: &PaddedBatch) -> Vec<DialogueSample> {
    (0..batch.len())
        .map(|i| DialogueSample {
            id: batch.ids[i],
            context: batch.context.iter().filter_map(|slot| slot.unpad(i)).collect(),
            query: batch.query.unpad(i).expect("every sample has a query"),
            response: batch.response[i]
                .iter()
                .zip(&batch.response_mask[i])
                .filter_map(|(&t, &m)| m.then_some(t))
                .collect(),
            conversation_start: batch.conversation_start[i],
        })
        .collect()
}
