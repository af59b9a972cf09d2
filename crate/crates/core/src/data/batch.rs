use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{BOS, EOS};
use crate::tensor::{mix64, Tensor};
use crate::visual::FeatureMap;

/// What the visual encoder consumes for one record.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualInput {
    /// `S×S×3` pixels in `[0, 1]` for the trainable backbone.
    Image(Tensor),
    /// Precomputed backbone output.
    Features(FeatureMap),
}

/// One encoded record.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub visual: VisualInput,
    pub keywords: Vec<usize>,
    pub description: Vec<usize>,
}

/// Padded ids for a group of examples. Decoder inputs are `BOS + desc` and
/// targets `desc + EOS`; both are padded to the longest description plus
/// one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub keywords: Vec<Vec<usize>>,
    /// `true` marks padding in `keywords`.
    pub keyword_padding: Vec<Vec<bool>>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn from_indices(examples: &[Example], indices: &[usize], pad_id: usize) -> Batch {
        let kw_len = indices
            .iter()
            .map(|&i| examples[i].keywords.len())
            .max()
            .unwrap_or(0);
        let t_len = indices
            .iter()
            .map(|&i| examples[i].description.len() + 1)
            .max()
            .unwrap_or(0);
        let pad = |mut v: Vec<usize>, n: usize| {
            v.resize(n, pad_id);
            v
        };
        let mut batch = Batch {
            indices: indices.to_vec(),
            keywords: Vec::new(),
            keyword_padding: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for &i in indices {
            let ex = &examples[i];
            let n = ex.keywords.len();
            batch.keywords.push(pad(ex.keywords.clone(), kw_len));
            batch
                .keyword_padding
                .push((0..kw_len).map(|j| j >= n).collect());
            let mut input = vec![BOS];
            input.extend(&ex.description);
            let mut target = ex.description.clone();
            target.push(EOS);
            batch.inputs.push(pad(input, t_len));
            batch.targets.push(pad(target, t_len));
        }
        batch
    }
}

/// Shuffles `examples` with a stream derived from `(seed, epoch)` and cuts
/// it into padded batches; the last batch may be short.
pub fn batch_iterator(
    examples: &[Example],
    batch_size: usize,
    pad_id: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(epoch))));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks
        .into_iter()
        .map(move |idx| Batch::from_indices(examples, &idx, pad_id))
}
