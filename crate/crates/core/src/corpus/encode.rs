use super::{tokenize, Dialogue, QaPair, Vocabulary, CLS, SEP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub max_len: usize,
    /// Prepend `speaker :` tokens to each utterance segment.
    pub speaker_prefix: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            max_len: 128,
            speaker_prefix: true,
        }
    }
}

/// Where the gold answer ended up in the assembled sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnswerTarget {
    Unanswerable,
    /// Global token positions `[start, end)`.
    Span { start: usize, end: usize },
    /// The answer utterance was dropped to fit `max_len`.
    TruncatedOut,
}

/// `[CLS] Q [SEP] U₁ [SEP] … Uₖ [SEP]` with alignment maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<u32>,
    pub tokens: Vec<String>,
    /// Utterance index per token; −1 for question and special tokens.
    pub token_utt: Vec<i32>,
    /// Dialogue-level speaker id per token; −1 where `token_utt` is −1.
    pub token_speaker: Vec<i32>,
    /// `(utterance, local offset)` for utterance content tokens only.
    pub global_to_local: Vec<Option<(usize, usize)>>,
    /// Global `[start, end)` of the question tokens.
    pub question_range: (usize, usize),
    /// Global `[start, end)` of each retained utterance's content tokens.
    pub utterance_ranges: Vec<(usize, usize)>,
    pub target: AnswerTarget,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn retained_utterances(&self) -> usize {
        self.utterance_ranges.len()
    }

    /// Global position of an utterance-local token, if that utterance survived.
    pub fn global_position(&self, utt: usize, offset: usize) -> Option<usize> {
        let (start, end) = *self.utterance_ranges.get(utt)?;
        (start + offset < end).then_some(start + offset)
    }

    pub fn is_content(&self, pos: usize) -> bool {
        self.global_to_local[pos].is_some()
    }
}

/// Assembles the model input for one question over one dialogue.
///
/// Utterances that do not fit in `max_len` are dropped whole from the end;
/// a question whose answer lives in a dropped utterance gets
/// [`AnswerTarget::TruncatedOut`].
pub fn encode_input(
    dialogue: &Dialogue,
    qa: &QaPair,
    vocab: &Vocabulary,
    opts: &EncodeOptions,
) -> Result<EncodedSequence> {
    let question = tokenize(&qa.question);
    if question.len() + 3 > opts.max_len {
        return Err(Error::QuestionTooLong {
            question_len: question.len(),
            max_len: opts.max_len,
        });
    }
    let speakers = dialogue.speaker_ids();

    let mut seq = EncodedSequence {
        token_ids: Vec::with_capacity(opts.max_len),
        tokens: Vec::with_capacity(opts.max_len),
        token_utt: Vec::with_capacity(opts.max_len),
        token_speaker: Vec::with_capacity(opts.max_len),
        global_to_local: Vec::with_capacity(opts.max_len),
        question_range: (1, 1 + question.len()),
        utterance_ranges: Vec::new(),
        target: AnswerTarget::Unanswerable,
    };
    let push = |seq: &mut EncodedSequence, tok: String, utt: i32, spk: i32, local| {
        seq.token_ids.push(vocab.id(&tok));
        seq.tokens.push(tok);
        seq.token_utt.push(utt);
        seq.token_speaker.push(spk);
        seq.global_to_local.push(local);
    };

    push(&mut seq, CLS.into(), -1, -1, None);
    for t in question {
        push(&mut seq, t, -1, -1, None);
    }
    push(&mut seq, SEP.into(), -1, -1, None);

    for (i, u) in dialogue.utterances.iter().enumerate() {
        let prefix = if opts.speaker_prefix {
            let mut p = tokenize(&u.speaker);
            p.push(":".into());
            p
        } else {
            Vec::new()
        };
        let content = u.tokens();
        if seq.len() + prefix.len() + content.len() + 1 > opts.max_len {
            break;
        }
        let (utt, spk) = (i as i32, speakers[i] as i32);
        for t in prefix {
            push(&mut seq, t, utt, spk, None);
        }
        let start = seq.len();
        for (off, t) in content.into_iter().enumerate() {
            push(&mut seq, t, utt, spk, Some((i, off)));
        }
        seq.utterance_ranges.push((start, seq.len()));
        push(&mut seq, SEP.into(), -1, -1, None);
    }

    seq.target = match &qa.answer {
        None => AnswerTarget::Unanswerable,
        Some(a) => match seq.utterance_ranges.get(a.utt) {
            Some(&(start, _)) => AnswerTarget::Span {
                start: start + a.start,
                end: start + a.end,
            },
            None => AnswerTarget::TruncatedOut,
        },
    };
    Ok(seq)
}
