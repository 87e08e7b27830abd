use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use super::engine::{Decoder, GenerateOutput, StepModel};
use super::events::{Clock, EventKind};
use super::{ChunkSplitter, DecodeError, DecodeOptions};

/// Result of a streaming run: the log so far, plus why it stopped early, if it did.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTrackLog {
    pub output: GenerateOutput,
    pub failure: Option<String>,
}

enum Msg {
    Token(u32, u64),
    Failed(String),
    End,
}

/// Decodes text as it arrives from `source`, which runs on its own thread and
/// feeds a bounded queue of `capacity` tokens. Each chunk is decoded as soon as
/// its boundary is known.
pub fn dual_track_run<M, I>(
    source: I,
    model: &M,
    options: DecodeOptions,
    clock: Arc<dyn Clock>,
    capacity: usize,
) -> Result<DualTrackLog, DecodeError>
where
    M: StepModel,
    I: IntoIterator<Item = Result<u32, String>>,
    I::IntoIter: Send,
{
    let decoder = Decoder::new(model, options, clock.clone())?;
    let (tx, rx) = sync_channel::<Msg>(capacity.max(1));
    let source = source.into_iter();
    let producer_clock = clock.clone();
    thread::scope(|scope| {
        scope.spawn(move || {
            for item in source {
                let msg = match item {
                    Ok(token) => Msg::Token(token, producer_clock.now_ns()),
                    Err(e) => Msg::Failed(e),
                };
                let stop = matches!(msg, Msg::Failed(_));
                if tx.send(msg).is_err() || stop {
                    return;
                }
            }
            let _ = tx.send(Msg::End);
        });
        Ok(consume(rx, decoder))
    })
}

/// Takes ownership of `rx` so the producer unblocks as soon as decoding stops.
fn consume<M: StepModel>(rx: Receiver<Msg>, mut decoder: Decoder<'_, M>) -> DualTrackLog {
    let mut splitter = ChunkSplitter::new(decoder.options().policy);
    let failure = loop {
        let chunk = match rx.recv() {
            Ok(Msg::Token(token, t_ns)) => {
                decoder.log_at(EventKind::Text { token }, t_ns);
                splitter.push(token)
            }
            Ok(Msg::End) => match splitter.finish() {
                Some(chunk) => match decoder.decode_chunk(&chunk) {
                    Ok(_) => break None,
                    Err(e) => break Some(e.to_string()),
                },
                None => break None,
            },
            Ok(Msg::Failed(e)) => break Some(format!("producer failed: {e}")),
            Err(_) => break Some("producer disconnected".to_string()),
        };
        if let Some(chunk) = chunk {
            if let Err(e) = decoder.decode_chunk(&chunk) {
                break Some(e.to_string());
            }
        }
    };
    drop(rx);
    if let Some(message) = &failure {
        decoder.log(EventKind::Error { message: message.clone() });
    }
    DualTrackLog { output: decoder.finish(), failure }
}
