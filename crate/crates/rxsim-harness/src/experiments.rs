//! The three packaged experiments plus the generic `simulate` runner.
//!
//! Every experiment is driven by a flat config file, runs deterministic
//! simulations (grid cells and sweep points in parallel), and emits CSV with
//! a fixed header. Reruns with the same config and seed produce byte
//! identical files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use rxsim::classifier::L4Protocol;
use rxsim::engine::{
    run, run_baseline, FlowConfig, GlobalLimit, IsrPath, MetricsStore, SimConfig, SimError,
    TaskBehavior, TaskConfig,
};
use rxsim::model::frame::FrameSpec;
use rxsim::workload::{TrafficPattern, WorkloadItem, WorkloadSpec};
use rxsim::{Capacity, Duration, FlowKey, Priority, Timestamp};

use crate::config::{ConfigError, ConfigFile};

pub const LP_PORT: u16 = 2001;
pub const HP_PORT: u16 = 2002;
pub const LP_PRIORITY: Priority = Priority(2);
pub const HP_PRIORITY: Priority = Priority(10);
pub const MEASUREMENT_PRIORITY: Priority = Priority(5);
pub const POLLING_PRIORITY: Priority = Priority(14);

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("config error: {0}")]
    Invalid(String),
    #[error("simulation failed: {0}")]
    Sim(SimError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl From<SimError> for ExperimentError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(msg) => ExperimentError::Invalid(msg),
            other => ExperimentError::Sim(other),
        }
    }
}

impl ExperimentError {
    /// Process exit code: 1 for configuration problems, 2 for runtime
    /// invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Invalid(_) => 1,
            ExperimentError::Sim(_) => 2,
            ExperimentError::Io { .. } => 1,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ExperimentError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Files produced by one experiment run.
#[derive(Debug, Default)]
pub struct ExperimentOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------- scenarios

/// Common two-flow scenario: a low- and a high-priority UDP socket, a
/// medium-priority measurement hog, and zero-cost receivers.
pub fn two_flow_scenario(
    duration: Duration,
    hp_capacity: Capacity,
    hp_period: Duration,
) -> SimConfig {
    SimConfig {
        duration,
        flows: vec![
            FlowConfig {
                protocol: L4Protocol::Udp,
                local_port: LP_PORT,
                priority: LP_PRIORITY,
                capacity: Capacity::Unbounded,
                period: Duration::from_millis(1),
            },
            FlowConfig {
                protocol: L4Protocol::Udp,
                local_port: HP_PORT,
                priority: HP_PRIORITY,
                capacity: hp_capacity,
                period: hp_period,
            },
        ],
        tasks: vec![
            TaskConfig {
                name: "measure".into(),
                priority: MEASUREMENT_PRIORITY,
                behavior: TaskBehavior::Measurement,
            },
            TaskConfig {
                name: "rx-lp".into(),
                priority: LP_PRIORITY,
                behavior: TaskBehavior::Receiver {
                    flow: FlowKey::Udp(LP_PORT),
                    per_packet: Duration::ZERO,
                },
            },
            TaskConfig {
                name: "rx-hp".into(),
                priority: HP_PRIORITY,
                behavior: TaskBehavior::Receiver {
                    flow: FlowKey::Udp(HP_PORT),
                    per_packet: Duration::ZERO,
                },
            },
        ],
        ..SimConfig::default()
    }
}

fn constant(port: u16, rate: u64) -> WorkloadItem {
    WorkloadItem {
        frame: FrameSpec::udp(port, 0),
        pattern: TrafficPattern::ConstantRate { rate },
    }
}

// --------------------------------------------------------- cpu per packet

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    ModifiedLp,
    ModifiedLpNoShortcircuit,
    ModifiedLpEagerCache,
    ModifiedHp,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ModifiedLp,
        Variant::ModifiedLpNoShortcircuit,
        Variant::ModifiedLpEagerCache,
        Variant::ModifiedHp,
        Variant::Baseline,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::ModifiedLp => "modified-lp",
            Variant::ModifiedLpNoShortcircuit => "modified-lp-no-shortcircuit",
            Variant::ModifiedLpEagerCache => "modified-lp-eager-cache",
            Variant::ModifiedHp => "modified-hp",
            Variant::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CpuPerPacketConfig {
    pub rates: Vec<u64>,
    pub duration: Duration,
    pub cost: rxsim::CostModel,
    pub audit: bool,
}

impl CpuPerPacketConfig {
    pub fn from_file(cfg: &ConfigFile) -> Result<CpuPerPacketConfig, ExperimentError> {
        let rates = cfg
            .get_u64_list("sweep.rates")?
            .unwrap_or_else(|| vec![100, 1_000, 10_000, 100_000, 1_000_000]);
        for rate in &rates {
            if !(100..=1_000_000).contains(rate) {
                return Err(ExperimentError::Invalid(format!(
                    "sweep.rates: rate {rate} outside supported range [100, 1000000]"
                )));
            }
        }
        Ok(CpuPerPacketConfig {
            rates,
            duration: cfg.get_duration_or("sweep.duration_ms", Duration::from_secs(5))?,
            cost: cfg.cost_model()?,
            audit: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuPerPacketRow {
    pub rate: u64,
    pub variant: Variant,
    pub avg_us_per_packet: f64,
}

/// Constant-rate floods against each stack variant; reports the mean
/// receive-path CPU cost of every packet that consumed CPU.
pub fn exp_cpu_per_packet(
    cfg: &CpuPerPacketConfig,
) -> Result<Vec<CpuPerPacketRow>, ExperimentError> {
    let mut jobs = Vec::new();
    for &rate in &cfg.rates {
        for variant in Variant::ALL {
            jobs.push((rate, variant));
        }
    }
    let mut rows = jobs
        .into_par_iter()
        .map(|(rate, variant)| -> Result<CpuPerPacketRow, ExperimentError> {
            // No flow or overall limitation: measure pure per-packet cost.
            let mut sim = two_flow_scenario(cfg.duration, Capacity::Unbounded, Duration::from_millis(1));
            sim.cost = cfg.cost.clone();
            sim.audit = cfg.audit;
            let target = match variant {
                Variant::ModifiedHp => HP_PORT,
                _ => LP_PORT,
            };
            sim.workload = WorkloadSpec {
                items: vec![constant(target, rate)],
            };
            match variant {
                Variant::ModifiedLpNoShortcircuit => sim.shortcircuit_enabled = false,
                Variant::ModifiedLpEagerCache => sim.eager_cache = true,
                _ => {}
            }
            let metrics = match variant {
                Variant::Baseline => run_baseline(&sim)?,
                _ => run(&sim)?,
            };
            let avg = metrics.avg_cost_per_handled_us().ok_or_else(|| {
                ExperimentError::Invalid(format!(
                    "sweep.rates: rate {rate} produced no handled packets"
                ))
            })?;
            Ok(CpuPerPacketRow {
                rate,
                variant,
                avg_us_per_packet: avg,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by_key(|r| {
        (
            r.rate,
            Variant::ALL.iter().position(|v| *v == r.variant).unwrap(),
        )
    });
    Ok(rows)
}

pub fn cpu_per_packet_csv(rows: &[CpuPerPacketRow]) -> String {
    let mut out = String::from("rate,variant,avg_us_per_packet\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{:.4}\n",
            row.rate,
            row.variant.label(),
            row.avg_us_per_packet
        ));
    }
    out
}

// ------------------------------------------------------------ latency dist

#[derive(Debug, Clone)]
pub struct LatencyDistConfig {
    pub flood_count: u64,
    pub spacing: Duration,
    pub hp_capacity: u64,
    pub hp_period: Duration,
    pub ring_capacity: u32,
    pub cost: rxsim::CostModel,
}

impl LatencyDistConfig {
    pub fn from_file(cfg: &ConfigFile) -> Result<LatencyDistConfig, ExperimentError> {
        let flood_count = cfg.get_u64_or("latency.flood_count", 100_000)?;
        if flood_count < 10_000 {
            return Err(ExperimentError::Invalid(
                "latency.flood_count: floods below 10000 packets give unusable tails".into(),
            ));
        }
        Ok(LatencyDistConfig {
            flood_count,
            spacing: cfg.get_duration_or("latency.spacing_ns", Duration::from_nanos(2_000))?,
            hp_capacity: cfg.get_u64_or("latency.hp_capacity", 1)?,
            hp_period: cfg.get_duration_or("latency.hp_period_us", Duration::from_micros(250))?,
            ring_capacity: cfg.get_u32_or("latency.ring_capacity", 256)?,
            cost: cfg.cost_model()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub path: IsrPath,
    pub samples: u64,
    /// Percentiles 0, 90, 99, 99.9, 99.99 in microseconds.
    pub percentiles: [f64; 5],
}

/// Nearest-rank percentile over an ascending sample list.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    assert!(!sorted.is_empty());
    if q <= 0.0 {
        return sorted[0];
    }
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Successive single-priority floods against one stack instance: high alone,
/// low alone (parking a backlog in the flow queues), then high again with a
/// trickle of low-priority refill so the ring keeps sitting at its recycle
/// threshold. Records every ISR execution duration by path and reduces them
/// to tail percentiles.
pub fn exp_latency_dist(
    cfg: &LatencyDistConfig,
) -> Result<(Vec<LatencyRow>, Vec<String>), ExperimentError> {
    let flood_len = Duration(cfg.flood_count * cfg.spacing.nanos());
    let gap = Duration::from_millis(10);
    let phase2 = Timestamp(flood_len.nanos() + gap.nanos());
    let phase3 = Timestamp(2 * (flood_len.nanos() + gap.nanos()));
    let duration = Duration(3 * flood_len.nanos() + 3 * gap.nanos());

    let mut sim = two_flow_scenario(
        duration,
        Capacity::PerPeriod(cfg.hp_capacity),
        cfg.hp_period,
    );
    sim.cost = cfg.cost.clone();
    sim.ring_capacity = cfg.ring_capacity;
    sim.record_path_latencies = true;
    let burst = |port: u16, start: Timestamp, count: u64, spacing: Duration| WorkloadItem {
        frame: FrameSpec::udp(port, 0),
        pattern: TrafficPattern::Burst {
            count,
            spacing,
            start,
        },
    };
    sim.workload = WorkloadSpec {
        items: vec![
            burst(HP_PORT, Timestamp::ZERO, cfg.flood_count, cfg.spacing),
            burst(LP_PORT, phase2, cfg.flood_count, cfg.spacing),
            burst(HP_PORT, phase3, cfg.flood_count, cfg.spacing),
            burst(
                LP_PORT,
                phase3,
                cfg.flood_count / 8,
                Duration(cfg.spacing.nanos() * 8),
            ),
        ],
    };
    let metrics = run(&sim)?;
    let samples = metrics
        .path_samples
        .as_ref()
        .expect("sample recording was enabled");

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for path in IsrPath::ALL {
        let Some(list) = samples.get(&path) else {
            continue;
        };
        let mut sorted: Vec<u64> = list.iter().map(|d| d.nanos()).collect();
        sorted.sort_unstable();
        if sorted.len() < 100 {
            warnings.push(format!(
                "insufficient samples: path {} observed only {} times",
                path.label(),
                sorted.len()
            ));
        }
        let percentiles =
            [0.0, 90.0, 99.0, 99.9, 99.99].map(|q| percentile(&sorted, q) as f64 / 1_000.0);
        rows.push(LatencyRow {
            path,
            samples: sorted.len() as u64,
            percentiles,
        });
    }
    Ok((rows, warnings))
}

pub fn latency_dist_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("path,p0,p90,p99,p999,p9999\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            row.path.label(),
            row.percentiles[0],
            row.percentiles[1],
            row.percentiles[2],
            row.percentiles[3],
            row.percentiles[4]
        ));
    }
    out
}

// ---------------------------------------------------------- mitigation map

#[derive(Debug, Clone)]
pub struct MitigationMapConfig {
    pub hp_rates: Vec<u64>,
    pub lp_rates: Vec<u64>,
    pub cell_duration: Duration,
    pub hp_flow_capacity: u64,
    pub hp_flow_period: Duration,
    pub modified_global: GlobalLimit,
    pub baseline_global: GlobalLimit,
    pub polling_priority: Priority,
    pub cost: rxsim::CostModel,
    pub audit: bool,
}

impl MitigationMapConfig {
    pub fn from_file(cfg: &ConfigFile) -> Result<MitigationMapConfig, ExperimentError> {
        let hp_rates = cfg.get_u64_list("grid.hp_rates")?.unwrap_or_else(|| {
            vec![100, 193, 373, 720, 1_389, 2_683, 5_179, 10_000]
        });
        let lp_rates = cfg.get_u64_list("grid.lp_rates")?.unwrap_or_else(|| {
            vec![
                100, 215, 464, 1_000, 2_154, 4_642, 10_000, 21_544, 46_416, 100_000,
            ]
        });
        for (key, rates) in [("grid.hp_rates", &hp_rates), ("grid.lp_rates", &lp_rates)] {
            if rates.contains(&0) {
                return Err(ExperimentError::Invalid(format!(
                    "{key}: rates must be positive"
                )));
            }
        }
        Ok(MitigationMapConfig {
            hp_rates,
            lp_rates,
            cell_duration: cfg.get_duration_or("cell.duration_ms", Duration::from_secs(3))?,
            hp_flow_capacity: cfg.get_u64_or("modified.hp_capacity", 1)?,
            hp_flow_period: cfg.get_duration_or("modified.hp_period_ms", Duration::from_millis(1))?,
            modified_global: GlobalLimit {
                capacity: cfg.get_u64_or("modified.global_capacity", 7)?,
                period: cfg.get_duration_or("modified.global_period_ms", Duration::from_millis(1))?,
            },
            baseline_global: GlobalLimit {
                capacity: cfg.get_u64_or("baseline.global_capacity", 3)?,
                period: cfg.get_duration_or("baseline.global_period_ms", Duration::from_millis(2))?,
            },
            polling_priority: cfg.get_priority_or("map.polling_priority", POLLING_PRIORITY)?,
            cost: cfg.cost_model()?,
            audit: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapRow {
    pub system: &'static str,
    pub hp_rate: u64,
    pub lp_rate: u64,
    pub cpu_util: f64,
    pub hp_liveness: f64,
    pub polling_engaged: bool,
}

/// One cell of the mitigation map.
pub fn mitigation_cell(
    cfg: &MitigationMapConfig,
    baseline: bool,
    hp_rate: u64,
    lp_rate: u64,
) -> Result<MapRow, ExperimentError> {
    let mut sim = two_flow_scenario(
        cfg.cell_duration,
        Capacity::PerPeriod(cfg.hp_flow_capacity),
        cfg.hp_flow_period,
    );
    sim.cost = cfg.cost.clone();
    sim.audit = cfg.audit;
    // The low-priority receiver sits below the measurement task and never
    // runs; drop it so the delivery counters say so explicitly.
    sim.tasks.retain(|t| t.name != "rx-lp");
    sim.global_limit = Some(if baseline {
        cfg.baseline_global
    } else {
        cfg.modified_global
    });
    sim.polling_priority = Some(cfg.polling_priority);
    sim.workload = WorkloadSpec {
        items: vec![constant(HP_PORT, hp_rate), constant(LP_PORT, lp_rate)],
    };
    let metrics = if baseline {
        run_baseline(&sim)?
    } else {
        run(&sim)?
    };
    let hp = metrics.flow(FlowKey::Udp(HP_PORT));
    Ok(MapRow {
        system: if baseline { "baseline" } else { "modified" },
        hp_rate,
        lp_rate,
        cpu_util: metrics.utilization(),
        hp_liveness: if hp.sent == 0 {
            0.0
        } else {
            hp.delivered as f64 / hp.sent as f64
        },
        polling_engaged: metrics.polling_engaged,
    })
}

/// CPU utilization and high-priority flow liveness over the full rate grid,
/// for the modified and the baseline system.
pub fn exp_mitigation_map(cfg: &MitigationMapConfig) -> Result<Vec<MapRow>, ExperimentError> {
    let mut jobs = Vec::new();
    for baseline in [false, true] {
        for &hp in &cfg.hp_rates {
            for &lp in &cfg.lp_rates {
                jobs.push((baseline, hp, lp));
            }
        }
    }
    let mut rows = jobs
        .into_par_iter()
        .map(|(baseline, hp, lp)| mitigation_cell(cfg, baseline, hp, lp))
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by_key(|r| (r.system, r.hp_rate, r.lp_rate));
    Ok(rows)
}

pub fn mitigation_map_csv(rows: &[MapRow]) -> String {
    let mut out = String::from("system,hp_rate,lp_rate,cpu_util,hp_liveness\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            row.system, row.hp_rate, row.lp_rate, row.cpu_util, row.hp_liveness
        ));
    }
    out
}

// ----------------------------------------------------------------- simulate

#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub sim: SimConfig,
    pub baseline: bool,
}

impl SimulateConfig {
    pub fn from_file(cfg: &ConfigFile) -> Result<SimulateConfig, ExperimentError> {
        let mut sim = SimConfig {
            duration: cfg.get_duration_or("sim.duration_ms", Duration::from_secs(1))?,
            cost: cfg.cost_model()?,
            ring_capacity: cfg.get_u32_or("engine.ring_capacity", 64)?,
            recycle_threshold: cfg.get_fraction_or("engine.recycle_threshold", (1, 2))?,
            max_priority: cfg.get_priority_or("engine.max_priority", Priority(15))?,
            network_idle_floor: cfg.get_priority_or("engine.network_idle_floor", Priority(1))?,
            arp_icmp_priority: cfg.get_priority_or("engine.arp_icmp_priority", Priority(1))?,
            polling_priority: cfg.get_priority("engine.polling_priority")?,
            poll_batch: cfg.get_u32_or("engine.poll_batch", 32)?,
            shortcircuit_enabled: cfg.get_bool_or("engine.shortcircuit", true)?,
            eager_cache: cfg.get_bool_or("engine.eager_cache", false)?,
            instrumentation_overhead: cfg
                .get_duration_or("engine.instrumentation_overhead_ns", Duration::ZERO)?,
            ..SimConfig::default()
        };
        if cfg.has("engine.global_capacity") || cfg.has("engine.global_period_us") {
            sim.global_limit = Some(GlobalLimit {
                capacity: cfg.get_u64_or("engine.global_capacity", 7)?,
                period: cfg.get_duration_or("engine.global_period_us", Duration::from_millis(1))?,
            });
        }

        for i in cfg.indexed_sections("flow") {
            let key = |suffix: &str| format!("flow.{i}.{suffix}");
            let protocol = match cfg
                .get_string(&key("protocol"))
                .unwrap_or_else(|| "udp".into())
                .as_str()
            {
                "udp" => L4Protocol::Udp,
                "tcp" => L4Protocol::Tcp,
                other => {
                    return Err(ExperimentError::Invalid(format!(
                        "flow.{i}.protocol: unknown protocol `{other}`"
                    )))
                }
            };
            sim.flows.push(FlowConfig {
                protocol,
                local_port: cfg.require_u16(&key("port"))?,
                priority: cfg.get_priority_or(&key("priority"), LP_PRIORITY)?,
                capacity: cfg.get_capacity_or(&key("capacity"), Capacity::Unbounded)?,
                period: cfg.get_duration_or(&key("period_us"), Duration::from_millis(1))?,
            });
        }

        for i in cfg.indexed_sections("task") {
            let key = |suffix: &str| format!("task.{i}.{suffix}");
            let kind = cfg
                .get_string(&key("kind"))
                .ok_or(ConfigError::Missing(key("kind")))?;
            let name = cfg
                .get_string(&key("name"))
                .unwrap_or_else(|| format!("task{i}"));
            let priority = cfg.get_priority_or(&key("priority"), MEASUREMENT_PRIORITY)?;
            let behavior = match kind.as_str() {
                "busy" => TaskBehavior::BusyWorker,
                "measurement" => TaskBehavior::Measurement,
                "receiver" => TaskBehavior::Receiver {
                    flow: parse_flow_key(cfg, &key("flow"))?,
                    per_packet: cfg.get_duration_or(&key("per_packet_ns"), Duration::ZERO)?,
                },
                other => {
                    return Err(ExperimentError::Invalid(format!(
                        "task.{i}.kind: unknown task kind `{other}`"
                    )))
                }
            };
            sim.tasks.push(TaskConfig {
                name,
                priority,
                behavior,
            });
        }

        for i in cfg.indexed_sections("workload") {
            let key = |suffix: &str| format!("workload.{i}.{suffix}");
            let protocol = cfg
                .get_string(&key("protocol"))
                .unwrap_or_else(|| "udp".into());
            let payload_len = cfg.get_u16(&key("payload_len"))?.unwrap_or(0);
            let fragment = cfg.get_bool_or(&key("fragment"), false)?;
            let frame = match protocol.as_str() {
                "arp" => FrameSpec::arp(),
                "icmp" => FrameSpec {
                    fragment,
                    ..FrameSpec::icmp(payload_len)
                },
                "udp" => FrameSpec {
                    fragment,
                    ..FrameSpec::udp(cfg.require_u16(&key("port"))?, payload_len)
                },
                "tcp" => FrameSpec {
                    fragment,
                    ..FrameSpec::tcp(cfg.require_u16(&key("port"))?, payload_len)
                },
                other => {
                    return Err(ExperimentError::Invalid(format!(
                        "workload.{i}.protocol: unknown protocol `{other}`"
                    )))
                }
            };
            let pattern = match cfg
                .get_string(&key("pattern"))
                .unwrap_or_else(|| "constant".into())
                .as_str()
            {
                "constant" => TrafficPattern::ConstantRate {
                    rate: cfg.get_u64_or(&key("rate"), 1_000)?,
                },
                "burst" => TrafficPattern::Burst {
                    count: cfg.get_u64_or(&key("count"), 1)?,
                    spacing: cfg.get_duration_or(&key("spacing_ns"), Duration::from_nanos(672))?,
                    start: cfg.timestamp_or(&key("start_us"), Timestamp::ZERO)?,
                },
                "poisson" => TrafficPattern::Poisson {
                    mean_rate: cfg.get_u64_or(&key("rate"), 1_000)?,
                    seed: cfg.get_u64_or(&key("seed"), 0)?,
                },
                other => {
                    return Err(ExperimentError::Invalid(format!(
                        "workload.{i}.pattern: unknown pattern `{other}`"
                    )))
                }
            };
            sim.workload.items.push(WorkloadItem { frame, pattern });
        }

        let baseline = cfg.get_bool_or("engine.baseline", false)?;
        Ok(SimulateConfig { sim, baseline })
    }
}

fn parse_flow_key(cfg: &ConfigFile, key: &str) -> Result<FlowKey, ExperimentError> {
    let value = cfg
        .get_string(key)
        .ok_or_else(|| ConfigError::Missing(key.to_string()))?;
    match value.as_str() {
        "arp-icmp" => Ok(FlowKey::ArpIcmp),
        "background" => Ok(FlowKey::Background),
        other => {
            let parsed = other.split_once(':').and_then(|(proto, port)| {
                let port: u16 = port.parse().ok()?;
                match proto {
                    "udp" => Some(FlowKey::Udp(port)),
                    "tcp" => Some(FlowKey::Tcp(port)),
                    _ => None,
                }
            });
            parsed.ok_or_else(|| {
                ExperimentError::Invalid(format!(
                    "{key}: `{other}` is not a flow (udp:PORT, tcp:PORT, arp-icmp, background)"
                ))
            })
        }
    }
}

pub fn run_simulate(cfg: &SimulateConfig) -> Result<MetricsStore, ExperimentError> {
    let metrics = if cfg.baseline {
        run_baseline(&cfg.sim)?
    } else {
        run(&cfg.sim)?
    };
    Ok(metrics)
}

/// Flat `metric,key,value` summary of one run.
pub fn summary_csv(metrics: &MetricsStore) -> String {
    let mut out = String::from("metric,key,value\n");
    let mut push = |metric: &str, key: &str, value: String| {
        out.push_str(&format!("{metric},{key},{value}\n"));
    };
    push("elapsed_ns", "", metrics.elapsed.nanos().to_string());
    push("idle_ns", "", metrics.idle.nanos().to_string());
    push("isr_cpu_ns", "", metrics.isr_cpu.nanos().to_string());
    for task in &metrics.tasks {
        push("task_cpu_ns", &task.name, task.cpu.nanos().to_string());
    }
    push("utilization", "", format!("{:.6}", metrics.utilization()));
    push("isr_handled", "", metrics.isr_handled.to_string());
    push("polled_handled", "", metrics.polled_handled.to_string());
    push(
        "polling_entries",
        "",
        metrics.polling_entries.to_string(),
    );
    for path in IsrPath::ALL {
        push(
            "isr_path_count",
            path.label(),
            metrics.path_count(path).to_string(),
        );
    }
    for (flow, fm) in &metrics.flows {
        let key = flow.to_string();
        push("flow_sent", &key, fm.sent.to_string());
        push("flow_nic_dropped", &key, fm.nic_dropped.to_string());
        push("flow_accepted", &key, fm.accepted.to_string());
        push("flow_declined_rate", &key, fm.declined_rate.to_string());
        push("flow_shortcircuited", &key, fm.shortcircuited.to_string());
        push("flow_revoked", &key, fm.revoked.to_string());
        push("flow_processed", &key, fm.processed.to_string());
        push("flow_delivered", &key, fm.delivered.to_string());
    }
    out
}

// ------------------------------------------------------------ entry points

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Simulate,
    CpuPerPacket,
    LatencyDist,
    MitigationMap,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Option<ExperimentKind> {
        match s {
            "simulate" => Some(ExperimentKind::Simulate),
            "cpu-per-packet" => Some(ExperimentKind::CpuPerPacket),
            "latency-dist" => Some(ExperimentKind::LatencyDist),
            "mitigation-map" => Some(ExperimentKind::MitigationMap),
            _ => None,
        }
    }
}

pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub plot: bool,
    pub audit: bool,
}

/// Read the config, check its declared kind, run the experiment and write
/// the output files.
pub fn run_experiment(
    kind: ExperimentKind,
    config_path: &Path,
    options: &RunOptions,
) -> Result<ExperimentOutput, ExperimentError> {
    let cfg = ConfigFile::load(config_path)?;
    if let Some(declared) = cfg.get_string("experiment.kind") {
        if ExperimentKind::parse(&declared) != Some(kind) {
            return Err(ExperimentError::Invalid(format!(
                "experiment.kind: config declares `{declared}` but the command requested another experiment"
            )));
        }
    }
    let seed = options
        .seed_override
        .or(cfg.get_u64("experiment.seed")?)
        .unwrap_or(0);
    let out_dir = match cfg.get_string("experiment.out") {
        Some(dir) if options.out_dir == Path::new("results") => PathBuf::from(dir),
        _ => options.out_dir.clone(),
    };

    let mut output = ExperimentOutput::default();
    match kind {
        ExperimentKind::CpuPerPacket => {
            let mut exp = CpuPerPacketConfig::from_file(&cfg)?;
            exp.audit = options.audit;
            cfg.finish()?;
            let rows = exp_cpu_per_packet(&exp)?;
            let path = out_dir.join("cpu_per_packet.csv");
            write_file(&path, &cpu_per_packet_csv(&rows))?;
            output.files.push(path);
            if options.plot {
                let path = out_dir.join("cpu_per_packet.svg");
                write_file(&path, &crate::plot::cpu_per_packet_svg(&rows))?;
                output.files.push(path);
            }
        }
        ExperimentKind::LatencyDist => {
            let exp = LatencyDistConfig::from_file(&cfg)?;
            cfg.finish()?;
            let (rows, warnings) = exp_latency_dist(&exp)?;
            output.warnings = warnings;
            let path = out_dir.join("latency_dist.csv");
            write_file(&path, &latency_dist_csv(&rows))?;
            output.files.push(path);
            if options.plot {
                let path = out_dir.join("latency_dist.svg");
                write_file(&path, &crate::plot::latency_dist_svg(&rows))?;
                output.files.push(path);
            }
        }
        ExperimentKind::MitigationMap => {
            let mut exp = MitigationMapConfig::from_file(&cfg)?;
            exp.audit = options.audit;
            cfg.finish()?;
            let rows = exp_mitigation_map(&exp)?;
            let path = out_dir.join("mitigation_map.csv");
            write_file(&path, &mitigation_map_csv(&rows))?;
            output.files.push(path);
            if options.plot {
                let path = out_dir.join("mitigation_map.svg");
                write_file(&path, &crate::plot::mitigation_map_svg(&rows))?;
                output.files.push(path);
            }
        }
        ExperimentKind::Simulate => {
            let mut exp = SimulateConfig::from_file(&cfg)?;
            exp.sim.seed = seed;
            exp.sim.audit = options.audit || exp.sim.audit;
            cfg.finish()?;
            let metrics = run_simulate(&exp)?;
            let path = out_dir.join("simulate_summary.csv");
            write_file(&path, &summary_csv(&metrics))?;
            output.files.push(path);
        }
    }
    Ok(output)
}

/// Parse and semantically validate a config without running it.
pub fn validate_config(config_path: &Path) -> Result<ExperimentKind, ExperimentError> {
    let cfg = ConfigFile::load(config_path)?;
    let declared = cfg
        .get_string("experiment.kind")
        .ok_or(ConfigError::Missing("experiment.kind".into()))?;
    let kind = ExperimentKind::parse(&declared).ok_or_else(|| {
        ExperimentError::Invalid(format!(
            "experiment.kind: `{declared}` is not one of simulate, cpu-per-packet, latency-dist, mitigation-map"
        ))
    })?;
    let _ = cfg.get_u64("experiment.seed")?;
    let _ = cfg.get_string("experiment.out");
    match kind {
        ExperimentKind::CpuPerPacket => {
            CpuPerPacketConfig::from_file(&cfg)?;
        }
        ExperimentKind::LatencyDist => {
            LatencyDistConfig::from_file(&cfg)?;
        }
        ExperimentKind::MitigationMap => {
            MitigationMapConfig::from_file(&cfg)?;
        }
        ExperimentKind::Simulate => {
            let exp = SimulateConfig::from_file(&cfg)?;
            exp.sim.validate().map_err(ExperimentError::Invalid)?;
        }
    }
    cfg.finish()?;
    Ok(kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let data: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&data, 0.0), 1);
        assert_eq!(percentile(&data, 90.0), 90);
        assert_eq!(percentile(&data, 99.0), 99);
        assert_eq!(percentile(&data, 99.9), 100);
        assert_eq!(percentile(&[7], 99.99), 7);
    }

    #[test]
    fn cpu_rows_sorted_and_labeled() {
        let rows = vec![
            CpuPerPacketRow {
                rate: 100,
                variant: Variant::ModifiedLp,
                avg_us_per_packet: 1.62,
            },
            CpuPerPacketRow {
                rate: 100,
                variant: Variant::Baseline,
                avg_us_per_packet: 12.1,
            },
        ];
        let csv = cpu_per_packet_csv(&rows);
        assert!(csv.starts_with("rate,variant,avg_us_per_packet\n"));
        assert!(csv.contains("100,modified-lp,1.6200"));
        assert!(csv.contains("100,baseline,12.1000"));
    }

    #[test]
    fn rates_outside_range_rejected() {
        let cfg = ConfigFile::parse("sweep.rates = 10").unwrap();
        assert!(CpuPerPacketConfig::from_file(&cfg).is_err());
    }
}
