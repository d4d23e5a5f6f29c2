use minirl_core::env::{FailureReason, TaskName, TaskSpec};
use minirl_core::oracle::{
    enumerate_responses, exact_kl, exact_objective, success_probability, EnumerationDomain, DEFAULT_BUDGET,
};
use minirl_core::policy::PolicySpec;
use minirl_core::rng::{stream_id, Purpose};
use minirl_core::trainer::{evaluate_avg_at_k, kl_from_initial};
use minirl_core::{make_rng, Difficulty, PolicyParams, Reward};

fn tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::add_mod(4, 0, 3),
        TaskSpec::sequence(TaskName::CopySeq, 2, 1, 2),
        TaskSpec::sequence(TaskName::ReverseSeq, 2, 1, 2),
        TaskSpec::sequence(TaskName::Parity, 2, 1, 3),
    ]
}

#[test]
fn correct_responses_end_with_the_gold_answer() {
    for task in tasks() {
        let domain = EnumerationDomain::new(task.clone(), 5, DEFAULT_BUDGET).unwrap();
        let seqs = enumerate_responses(&domain);
        let mut rng = make_rng(3, 0);
        for _ in 0..20 {
            let prompt = task.sample_prompt(&mut rng);
            let correct: Vec<_> = seqs
                .iter()
                .filter(|a| task.verify(&prompt, a.as_slice()).reward == Reward::Correct)
                .collect();
            let gold = task.gold_response(&prompt).unwrap();
            assert!(correct.contains(&&gold), "{:?} {:?}", task.name, prompt);
            for a in &correct {
                assert!(a.as_slice().ends_with(gold.as_slice()), "{a:?}");
                let prefix = &a.as_slice()[..a.len() - gold.len()];
                assert!(!prefix.contains(&task.eos()));
            }
            for a in &seqs {
                let rep = task.verify(&prompt, a.as_slice());
                assert_eq!(rep.failure_reason.is_none(), rep.reward.is_correct());
            }
        }
    }
}

#[test]
fn unsolvable_prompts_are_never_rewarded() {
    for task in tasks() {
        let task = task.with_unsolvable(1.0);
        let domain = EnumerationDomain::new(task.clone(), 5, DEFAULT_BUDGET).unwrap();
        let seqs = enumerate_responses(&domain);
        let mut rng = make_rng(4, 0);
        for _ in 0..10 {
            let prompt = task.sample_prompt(&mut rng);
            assert_eq!(prompt.difficulty, Difficulty::Unsolvable);
            assert!(task.gold_response(&prompt).is_none());
            assert!(seqs.iter().all(|a| task.verify(&prompt, a.as_slice()).reward == Reward::Wrong));
        }
    }
}

#[test]
fn truncated_response_is_wrong() {
    let task = TaskSpec::add_mod(4, 0, 3);
    let prompt = task.sample_prompt(&mut make_rng(0, 0));
    let gold = task.gold_response(&prompt).unwrap();
    let body = &gold.as_slice()[..gold.len() - 1];
    let rep = task.verify(&prompt, body);
    assert_eq!(rep.reward, Reward::Wrong);
    assert_eq!(rep.failure_reason, Some(FailureReason::Truncated));
}

fn single_prompt_task() -> TaskSpec {
    TaskSpec::add_mod(2, 1, 1)
}

#[test]
fn sampled_kl_agrees_with_enumeration() {
    let task = single_prompt_task();
    let v = task.vocab_size();
    assert_eq!(v, 4);
    let spec = PolicySpec::tabular(v, 2);
    let p = PolicyParams::init(spec.clone(), 0.6, &mut make_rng(1, 0)).unwrap();
    let q = PolicyParams::init(spec, 0.6, &mut make_rng(2, 0)).unwrap();
    let prompt = task.sample_prompt(&mut make_rng(0, 0));
    let max_len = 4;
    let domain = EnumerationDomain::new(task.clone(), max_len, DEFAULT_BUDGET).unwrap();
    let exact = exact_kl(&p, &q, &domain, &prompt).unwrap();

    let batches = 40;
    let per = 500;
    let estimates: Vec<f64> = (0..batches)
        .map(|b| kl_from_initial(&p, &q, &task, per, max_len, &mut make_rng(9, b)).unwrap())
        .collect();
    let mean = estimates.iter().sum::<f64>() / batches as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    let se = (var / batches as f64).sqrt();
    assert!(exact > 0.01, "{exact}");
    assert!((mean - exact).abs() <= 3.0 * se, "sampled {mean} +- {se}, exact {exact}");
}

#[test]
fn avg_at_k_agrees_with_success_probability() {
    let task = single_prompt_task();
    let spec = PolicySpec::tabular(task.vocab_size(), 2);
    let p = PolicyParams::init(spec, 1.0, &mut make_rng(5, 0)).unwrap();
    let prompt = task.sample_prompt(&mut make_rng(0, 0));
    let max_len = 4;
    let domain = EnumerationDomain::new(task.clone(), max_len, DEFAULT_BUDGET).unwrap();
    let exact = success_probability(&p, &domain, &prompt).unwrap();
    let objective = exact_objective(&p, &domain, &prompt).unwrap();
    assert!((objective - (2.0 * exact - 1.0)).abs() < 1e-12);

    let n = 20_000;
    let est = evaluate_avg_at_k(&p, &task, n, 1, 1.0, max_len, &mut make_rng(6, stream_id(Purpose::Eval, 0, 0))).unwrap();
    let se = (exact * (1.0 - exact) / n as f64).sqrt();
    assert!((est - exact).abs() <= 3.0 * se, "avg@1 {est}, exact {exact} (se {se})");
}

#[test]
fn gold_policy_scores_perfectly() {
    let task = single_prompt_task();
    let prompt = task.sample_prompt(&mut make_rng(0, 0));
    let gold = task.gold_response(&prompt).unwrap();
    let spec = PolicySpec::tabular(task.vocab_size(), 2);
    let mut p = PolicyParams::zeros(spec).unwrap();
    let target = minirl_core::AlgoConfig::new(minirl_core::AlgoKind::Raft);
    let example = minirl_core::TrainExample {
        prompt: prompt.clone(),
        response: gold,
        weight: 1.0,
        old_logprobs: vec![0.0; 3],
    };
    for _ in 0..200 {
        let g = minirl_core::policy::loss_grad(&p, std::slice::from_ref(&example), &target).unwrap().unwrap();
        for (t, d) in p.theta.iter_mut().zip(&g.grad) {
            *t += 5.0 * d;
        }
    }
    // tabular logits are linear in theta, so scaling sharpens every argmax
    for t in p.theta.iter_mut() {
        *t *= 20.0;
    }
    let domain = EnumerationDomain::new(task.clone(), 4, DEFAULT_BUDGET).unwrap();
    assert!(success_probability(&p, &domain, &prompt).unwrap() > 1.0 - 1e-6);
    let acc = evaluate_avg_at_k(&p, &task, 16, 8, 1.0, 4, &mut make_rng(1, 1)).unwrap();
    assert_eq!(acc, 1.0);
}
