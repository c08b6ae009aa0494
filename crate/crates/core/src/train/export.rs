use std::io::Write;

use crate::model::stream::forward_token;
use crate::model::{ForwardTrace, Model, ModalityTag, SeqToken, UnifiedKVCache};

/// Write the final hidden state at every text-output position as `tick,position,h0,h1,...` lines.
pub fn export_text_hidden(model: &Model, tokens: &[SeqToken], out: &mut dyn Write) -> super::Result<usize> {
    let mut cache = UnifiedKVCache::new(&model.config);
    let mut rows = 0;
    for (pos, t) in tokens.iter().enumerate() {
        let mut trace = ForwardTrace::default();
        forward_token(model, &mut cache, t.id, t.tag, t.tick, pos, Some(&mut trace))?;
        if t.tag == ModalityTag::TextOut {
            let vals: Vec<String> = trace.hidden.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{},{},{}", t.tick, pos, vals.join(",")).map_err(|source| super::TrainError::Io { path: "hidden export".into(), source })?;
            rows += 1;
        }
    }
    Ok(rows)
}
