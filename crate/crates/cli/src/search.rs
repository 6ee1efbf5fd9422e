//! The JSON search payload shared by the `search` subcommand and the service.

use serde::{Deserialize, Serialize};

use phrasal::corpus::Sentence;
use phrasal::encoder::PhraseEncoder;
use phrasal::index::PhraseIndex;
use phrasal::pipeline::{retrieve, RetrievalResult, SpanSelection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpanOut {
    pub s: usize,
    pub e: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitOut {
    pub phrase: String,
    pub context: String,
    pub s: usize,
    pub e: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_span: QuerySpanOut,
    pub hits: Vec<HitOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<QueryResult>,
}

impl SearchResponse {
    pub fn from_results(results: &[RetrievalResult]) -> Self {
        SearchResponse {
            results: results
                .iter()
                .map(|r| QueryResult {
                    query_span: QuerySpanOut {
                        s: r.query.s,
                        e: r.query.e,
                        text: r.query.text.clone(),
                    },
                    hits: r
                        .hits
                        .iter()
                        .map(|h| HitOut {
                            phrase: h.entry.phrase.clone(),
                            context: h.entry.context.clone(),
                            s: h.entry.s,
                            e: h.entry.e,
                            score: h.score,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub text: String,
    pub k: usize,
}

/// Tokenizes `text`, segments it and searches the index.
pub fn search_text(
    encoder: &PhraseEncoder,
    index: &PhraseIndex,
    text: &str,
    lang: &str,
    selection: SpanSelection,
    k: usize,
) -> phrasal::Result<SearchResponse> {
    let sentence = Sentence::from_text(0, lang, text, encoder.lowercase);
    Ok(SearchResponse::from_results(&retrieve(encoder, &sentence, index, selection, k)?))
}
