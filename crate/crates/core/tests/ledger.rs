//! Cost accounting against an integer oracle: prices carry at most four
//! decimal places, so every cost is an exact integer number of 1e-10 USD.

mod common;

use std::sync::Arc;

use common::oracle::{ledger_trial, oracle_decimal};
use homeagent_core::llm::{
    format_decimal, ChatMessage, ChatProvider, ChatRequest, ChatResponse, Gateway, HashEmbedder, LlmError, Price,
    PricingTable, StageTag,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ledger_totals_are_exact_over_1000_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ed9e5);
    for trial in 0..1000 {
        if let Err(e) = ledger_trial(&mut rng) {
            panic!("trial {trial}: {e}");
        }
    }
}

#[test]
fn oracle_rendering_trims_to_two_places() {
    assert_eq!(oracle_decimal(0), "0.00");
    assert_eq!(oracle_decimal(25_000_000_000), "2.50");
    assert_eq!(oracle_decimal(1), "0.0000000001");
}

#[test]
fn failed_calls_are_not_billed() {
    struct Down;
    impl ChatProvider for Down {
        fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, LlmError> {
            Err(LlmError::ProviderUnreachable("offline".into()))
        }
    }
    let table = PricingTable::default().with("default", Price::per_million("1", "1").unwrap());
    let gateway = Gateway::new(Arc::new(Down), Arc::new(HashEmbedder), table);
    let req = ChatRequest::new(StageTag::Derive, vec![ChatMessage::user("Request: x")]);
    assert!(gateway.chat("s", req).is_err());
    assert!(gateway.ledger().entries().is_empty());
    assert_eq!(format_decimal(&gateway.ledger().total_cost(), 8), "0.00");
}
