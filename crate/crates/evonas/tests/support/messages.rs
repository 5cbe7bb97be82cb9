//! Generators for arbitrary valid wire messages.

#![allow(dead_code)]

use evonas::wire::{BrokerEntry, Message, Role};
use evonas_core::{EvalConfig, EvaluatorKind};
use proptest::prelude::*;

fn id() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z0-9-]{1,36}",
        any::<String>(),
        Just(String::new()),
    ]
}

fn genotype() -> impl Strategy<Value = String> {
    let token = prop_oneof![
        (prop::sample::select(vec![1, 3, 5, 7]), prop::sample::select(vec![8, 16, 32, 64]))
            .prop_map(|(k, f)| format!("{k}x{k}conv2d:{f}")),
        Just("dropout2d".to_string()),
    ];
    prop::collection::vec(token, 1..=10).prop_map(|v| v.join(","))
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        0.0f64..20.0,
        Just(0.0),
    ]
}

fn eval_config() -> impl Strategy<Value = EvalConfig> {
    (
        prop::sample::select(vec![
            EvaluatorKind::Surrogate,
            EvaluatorKind::Delay,
            EvaluatorKind::External,
        ]),
        genotype(),
        any::<u32>(),
        any::<u64>(),
        finite(),
    )
        .prop_map(|(evaluator_kind, target_key, epochs, delay_ms, noise_sigma2)| EvalConfig {
            evaluator_kind,
            target_key,
            epochs,
            delay_ms,
            noise_sigma2,
        })
}

fn error() -> impl Strategy<Value = Option<String>> {
    prop::option::of(any::<String>())
}

pub fn message() -> impl Strategy<Value = Message> {
    let opt_u32 = || prop::option::of(any::<u32>());
    prop_oneof![
        (id(), id(), genotype(), eval_config(), any::<u32>()).prop_map(
            |(task_id, sender_id, genotype, eval_config, generation)| Message::SubmitTask {
                task_id,
                sender_id,
                genotype,
                eval_config,
                generation,
            }
        ),
        id().prop_map(|sender_id| Message::TaskRequest { sender_id }),
        (id(), id(), genotype(), eval_config(), any::<u32>(), any::<bool>()).prop_map(
            |(task_id, lease_id, genotype, eval_config, generation, owned)| {
                Message::TaskAssignment {
                    task_id,
                    lease_id,
                    genotype,
                    eval_config,
                    generation,
                    owned,
                }
            }
        ),
        Just(Message::NoTask),
        (id(), id(), prop::option::of(id()), finite(), finite(), any::<u64>(), error()).prop_map(
            |(task_id, sender_id, lease_id, fitness, loss, eval_ms, error)| Message::TaskResult {
                task_id,
                sender_id,
                lease_id,
                fitness,
                loss,
                eval_ms,
                error,
            }
        ),
        (id(), prop::option::of(id()), opt_u32(), opt_u32()).prop_map(
            |(sender_id, lease_id, idle_workers, clients)| Message::Heartbeat {
                sender_id,
                lease_id,
                idle_workers,
                clients,
            }
        ),
        prop::option::of(id()).prop_map(|lease_id| Message::HeartbeatAck { lease_id }),
        any::<String>().prop_map(|reason| Message::Reconnect { reason }),
        (id(), "[a-z0-9.]{1,20}:[0-9]{1,5}", opt_u32()).prop_map(|(sender_id, address, clients)| {
            Message::RegisterBroker {
                sender_id,
                address,
                clients,
            }
        }),
        (id(), prop::sample::select(vec![Role::Worker, Role::Model, Role::Broker]))
            .prop_map(|(sender_id, role)| Message::BrokerListRequest { sender_id, role }),
        prop::collection::vec((id(), id(), opt_u32()), 0..5).prop_map(|v| Message::BrokerList {
            brokers: v
                .into_iter()
                .map(|(broker_id, address, clients)| BrokerEntry {
                    broker_id,
                    address,
                    clients,
                })
                .collect(),
        }),
        (id(), id()).prop_map(|(sender_id, address)| Message::LinkRequest { sender_id, address }),
        id().prop_map(|sender_id| Message::LinkAccept { sender_id }),
        (id(), id(), genotype(), eval_config(), any::<u32>()).prop_map(
            |(task_id, sender_id, genotype, eval_config, generation)| Message::ShareTask {
                task_id,
                sender_id,
                genotype,
                eval_config,
                generation,
            }
        ),
        (id(), id(), finite(), finite(), any::<u64>(), error()).prop_map(
            |(task_id, sender_id, fitness, loss, eval_ms, error)| Message::ReclaimTask {
                task_id,
                sender_id,
                fitness,
                loss,
                eval_ms,
                error,
            }
        ),
    ]
}
