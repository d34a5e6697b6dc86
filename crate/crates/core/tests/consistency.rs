use dialmem::data::{assemble_ddm_input, assemble_erm_input, decoder_sequence, DialogueExample};
use dialmem::evaluation::{gold_nll, perplexity};
use dialmem::objective::dialogue_forward;
use dialmem::tensor::Tape;
use dialmem::{Model, ModelConfig};
use proptest::prelude::*;

fn model(seed: u64) -> Model {
    Model::new(ModelConfig {
        d_model: 8,
        n_layers_enc: 1,
        n_layers_dec: 1,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 24,
        k: 3,
        l: 3,
        max_len: 32,
        init_std: 0.3,
        seed,
    })
    .unwrap()
}

fn example(persona: &[u32], query: &[u32], gold: &[u32], other: &[u32]) -> DialogueExample {
    DialogueExample {
        context: assemble_ddm_input(&[persona.to_vec()], &[], query, 32).unwrap(),
        persona_premise: assemble_erm_input(persona, 32).unwrap(),
        candidates: vec![decoder_sequence(other, 32), decoder_sequence(gold, 32)],
        gold_index: 1,
    }
}

fn words() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(11u32..24, 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perplexity_is_exp_of_token_mean_lm_loss(
        seed in 0u64..1000,
        turns in proptest::collection::vec((words(), words(), words(), words()), 1..4),
    ) {
        let m = model(seed);
        let examples: Vec<DialogueExample> = turns.iter().map(|(p, q, g, o)| example(p, q, g, o)).collect();
        let mut total = 0.0;
        let mut tokens = 0;
        for ex in &examples {
            let mut tape = Tape::new();
            let g = m.bind(&mut tape, &|_| false);
            let f = dialogue_forward(&g, &mut tape, ex).unwrap();
            total += tape.item(f.l_lm).unwrap() * f.gold_tokens as f64;
            tokens += f.gold_tokens;
        }
        let (nll, n) = gold_nll(&m, &examples).unwrap();
        prop_assert_eq!(n, tokens);
        prop_assert!((nll - total).abs() <= 1e-9 * total.abs().max(1.0));
        let ppl = perplexity(&m, &examples).unwrap();
        prop_assert!((ppl - (total / tokens as f64).exp()).abs() <= 1e-9 * ppl);
    }
}
