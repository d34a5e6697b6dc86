//! Finite-difference checks of every training objective on a live model.

use crate::data::{assemble_ddm_input, assemble_erm_input, decoder_sequence, DialogueExample, EntailmentExample, NliLabel};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check_with_fault, GradCheck, DEFAULT_EPS};
use crate::losses::{stage2_total, LossWeights, Stage2Terms};
use crate::model::{Model, ModelConfig, FIXED_PARAMS};
use crate::objective::{dialogue_forward, entailment_forward, memory_orthogonality};
use crate::tensor::{FaultInjection, Tape, Tensor, Var};

/// Relative-error ceiling for every analytic gradient.
pub const TOLERANCE: f64 = 1e-4;

pub const COMPONENTS: [&str; 6] = ["l_erm", "l_ddm", "l_bow", "l_lm", "l_cls", "total"];

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub result: GradCheck,
    /// Name of the parameter holding the worst coordinate.
    pub worst_param: Option<String>,
}

fn component_value(
    model: &Model,
    tape: &mut Tape,
    vars: &[Var],
    component: &str,
    nli: &EntailmentExample,
    dia: &DialogueExample,
    w: &LossWeights,
) -> Result<Var> {
    let g = model.graph(vars.to_vec())?;
    match component {
        "l_erm" => Ok(entailment_forward(&g, tape, nli)?.loss),
        "l_ddm" => memory_orthogonality(&g, tape),
        _ => {
            let f = dialogue_forward(&g, tape, dia)?;
            match component {
                "l_bow" => Ok(f.l_bow),
                "l_lm" => Ok(f.l_lm),
                "l_cls" => Ok(f.l_cls),
                _ => {
                    let l_ddm = memory_orthogonality(&g, tape)?;
                    let terms = Stage2Terms {
                        l_ddm,
                        l_bow: f.l_bow,
                        l_lm: f.l_lm,
                        l_cls: f.l_cls,
                    };
                    Ok(stage2_total(tape, terms, w)?.0)
                }
            }
        }
    }
}

/// Checks each objective against central differences over every
/// gradient-tracked parameter.
pub fn check_objectives(
    model: &Model,
    nli: &EntailmentExample,
    dia: &DialogueExample,
    w: &LossWeights,
    fault: FaultInjection,
) -> Result<Vec<ComponentCheck>> {
    let inputs: Vec<Tensor> = model
        .params
        .tensors()
        .iter()
        .zip(model.params.names())
        .map(|(t, n)| t.clone().with_requires_grad(!FIXED_PARAMS.contains(&n.as_str())))
        .collect();
    COMPONENTS
        .iter()
        .map(|&component| {
            let f = |tape: &mut Tape, vars: &[Var]| component_value(model, tape, vars, component, nli, dia, w);
            let result = finite_diff_check_with_fault(f, &inputs, DEFAULT_EPS, fault)?;
            let worst_param = result.worst.map(|(i, _)| model.params.names()[i].clone());
            Ok(ComponentCheck {
                component,
                result,
                worst_param,
            })
        })
        .collect()
}

/// Small model used for gradient verification. The init scale is `1/sqrt(d)`
/// so attention scores carry gradients well above the finite-difference
/// noise floor.
pub fn reference_model(seed: u64) -> Result<Model> {
    Model::new(ModelConfig {
        d_model: 16,
        n_layers_enc: 2,
        n_layers_dec: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 20,
        k: 4,
        l: 4,
        max_len: 16,
        init_std: 0.25,
        seed,
    })
}

/// One entailment pair and one two-candidate dialogue turn over the
/// reference vocabulary.
pub fn reference_examples() -> Result<(EntailmentExample, DialogueExample)> {
    let nli = EntailmentExample {
        premise: assemble_erm_input(&[11, 12, 13, 14], 16)?,
        decoder_ids: decoder_sequence(&[11, 14], 16),
        label: NliLabel::Entailment,
    };
    let dia = DialogueExample {
        context: assemble_ddm_input(&[vec![11, 12], vec![13]], &[(vec![15], vec![16, 17])], &[18], 16)?,
        persona_premise: assemble_erm_input(&[11, 12, 13], 16)?,
        candidates: vec![decoder_sequence(&[19, 12], 16), decoder_sequence(&[16], 16)],
        gold_index: 0,
    };
    Ok((nli, dia))
}

/// [`check_objectives`] on the reference model and examples.
pub fn check_reference(seed: u64, fault: FaultInjection) -> Result<Vec<ComponentCheck>> {
    let model = reference_model(seed)?;
    let (nli, dia) = reference_examples()?;
    check_objectives(&model, &nli, &dia, &LossWeights::default(), fault)
}
