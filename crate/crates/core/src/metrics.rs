//! Sparsity and accuracy measurement on the quantized model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Architecture, LayerWeights};
use crate::quantizer::QuantizedWeights;

pub const METRICS_HEADER: &str = "epoch,weight_sparsity,channel_sparsity,train_loss,eval_accuracy";
pub const CHANNELS_HEADER: &str = "layer_index,total_channels,surviving_channels";
pub const SPARSITY_SERIES_HEADER: &str = "epoch,weight_sparsity,channel_sparsity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCount {
    pub total: usize,
    pub surviving: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub weight_sparsity: f64,
    pub channel_sparsity: f64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub per_layer_channel_counts: Vec<ChannelCount>,
    /// Zero fraction of the float weights after shrinkage (diagnostic only).
    pub float_weight_sparsity: f64,
}

/// Zero codes over all codes of the quantized layers.
pub fn weight_sparsity(u: &QuantizedWeights) -> f64 {
    let (zeros, total) = u.layers().fold((0, 0), |(z, t), (_, l)| {
        (z + l.zero_codes(), t + l.codes.len())
    });
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

/// Channel counts per quantized layer; a channel survives if any of its codes is nonzero.
/// Channels are output channels (axis 0).
pub fn channel_counts(u: &QuantizedWeights) -> Vec<ChannelCount> {
    u.layers()
        .map(|(_, l)| {
            let total = l.shape[0];
            let group = l.codes.len() / total;
            let surviving = l
                .codes
                .chunks(group)
                .filter(|c| c.iter().any(|&v| v != 0))
                .count();
            ChannelCount { total, surviving }
        })
        .collect()
}

pub fn channel_sparsity(u: &QuantizedWeights) -> f64 {
    let counts = channel_counts(u);
    let total: usize = counts.iter().map(|c| c.total).sum();
    let dead: usize = counts.iter().map(|c| c.total - c.surviving).sum();
    if total == 0 {
        0.0
    } else {
        dead as f64 / total as f64
    }
}

/// Top-1 accuracy of `weights` on `data`.
pub fn eval_accuracy(arch: &Architecture, weights: &LayerWeights, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    let chunk = 256;
    let mut start = 0;
    while start < data.len() {
        let idx: Vec<usize> = (start..(start + chunk).min(data.len())).collect();
        let (images, labels) = data.batch(&idx);
        let logits = arch.logits(weights, images)?;
        let k = logits.shape()[1];
        for (row, &y) in logits.data().chunks(k).zip(&labels) {
            if argmax(row) == y {
                correct += 1;
            }
        }
        start += chunk;
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.weight_sparsity, r.channel_sparsity, r.train_loss, r.eval_accuracy
        )
        .unwrap();
    }
    out
}

pub fn channels_csv(counts: &[ChannelCount]) -> String {
    let mut out = format!("{CHANNELS_HEADER}\n");
    for (i, c) in counts.iter().enumerate() {
        writeln!(out, "{},{},{}", i, c.total, c.surviving).unwrap();
    }
    out
}

/// Plot-ready tables: sparsity against epoch, and the last record's channel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySeries {
    pub sparsity_vs_epoch: String,
    pub channels_per_layer: String,
}

pub fn sparsity_timeseries(records: &[MetricsRecord]) -> Result<SparsitySeries> {
    let last = records
        .last()
        .ok_or_else(|| Error::Argument("need at least one metrics record".into()))?;
    let mut series = format!("{SPARSITY_SERIES_HEADER}\n");
    for r in records {
        writeln!(
            series,
            "{},{:.6},{:.6}",
            r.epoch, r.weight_sparsity, r.channel_sparsity
        )
        .unwrap();
    }
    Ok(SparsitySeries {
        sparsity_vs_epoch: series,
        channels_per_layer: channels_csv(&last.per_layer_channel_counts),
    })
}

/// A metrics row as read back from `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub weight_sparsity: f64,
    pub channel_sparsity: f64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Format {
                offset: 0,
                message: format!("expected header {METRICS_HEADER:?}, found {other:?}"),
            })
        }
    }
    let mut offset = METRICS_HEADER.len() as u64 + 1;
    let mut rows = vec![];
    for line in lines {
        let bad = |m: &str| Error::Format {
            offset,
            message: format!("{m}: {line:?}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
            weight_sparsity: num(f[1])?,
            channel_sparsity: num(f[2])?,
            train_loss: num(f[3])?,
            eval_accuracy: num(f[4])?,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(rows)
}

pub fn parse_channels_csv(text: &str) -> Result<Vec<ChannelCount>> {
    let mut lines = text.lines();
    if lines.next() != Some(CHANNELS_HEADER) {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected header {CHANNELS_HEADER:?}"),
        });
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Format {
                    offset: 0,
                    message: format!("bad channel row {line:?}"),
                })
            };
            if f.len() != 3 {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("bad channel row {line:?}"),
                });
            }
            Ok(ChannelCount {
                total: parse(f[1])?,
                surviving: parse(f[2])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::quantizer::{QuantizedLayer, QuantizedParam};

    fn quantized(layers: Vec<(Vec<usize>, Vec<i8>)>) -> QuantizedWeights {
        QuantizedWeights {
            params: layers
                .into_iter()
                .enumerate()
                .map(|(i, (shape, codes))| QuantizedParam::Quantized {
                    name: format!("l{i}"),
                    layer: QuantizedLayer {
                        shape,
                        scale: 0.5,
                        codes,
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn sparsity_extremes() {
        let zero = quantized(vec![(vec![2, 3], vec![0; 6])]);
        assert_eq!(weight_sparsity(&zero), 1.0);
        assert_eq!(channel_sparsity(&zero), 1.0);
        let dense = quantized(vec![(vec![2, 3], vec![1; 6])]);
        assert_eq!(weight_sparsity(&dense), 0.0);
        assert_eq!(channel_sparsity(&dense), 0.0);
    }

    #[test]
    fn weight_sparsity_counts_codes() {
        let mut codes = vec![0i8; 400];
        for c in codes.iter_mut().take(60) {
            *c = 3;
        }
        let u = quantized(vec![(vec![4, 100], codes)]);
        assert!((weight_sparsity(&u) - 0.85).abs() < 1e-15);
    }

    #[test]
    fn one_dead_channel_of_four() {
        let mut codes = vec![1i8; 8];
        codes[2] = 0;
        codes[3] = 0;
        let u = quantized(vec![(vec![4, 2], codes)]);
        assert_eq!(channel_sparsity(&u), 0.25);
        assert_eq!(
            channel_counts(&u),
            vec![ChannelCount {
                total: 4,
                surviving: 3
            }]
        );
    }

    #[test]
    fn biases_are_not_counted() {
        let mut u = quantized(vec![(vec![1, 2], vec![1, 1])]);
        u.params.push(QuantizedParam::Float {
            name: "b".into(),
            tensor: crate::tensor::Tensor::zeros(&[5]),
        });
        assert_eq!(weight_sparsity(&u), 0.0);
    }

    fn record(epoch: usize, ws: f64, cs: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            weight_sparsity: ws,
            channel_sparsity: cs,
            train_loss: 1.0 / (epoch as f64 + 3.0),
            eval_accuracy: 0.5,
            per_layer_channel_counts: vec![
                ChannelCount {
                    total: 8,
                    surviving: 5,
                },
                ChannelCount {
                    total: 4,
                    surviving: 4,
                },
            ],
            float_weight_sparsity: ws,
        }
    }

    #[test]
    fn timeseries_format() {
        let records: Vec<_> = (1..=3)
            .map(|e| record(e, 0.1 * e as f64, 0.05 * e as f64))
            .collect();
        let s = sparsity_timeseries(&records).unwrap();
        let lines: Vec<&str> = s.sparsity_vs_epoch.lines().collect();
        assert_eq!(lines[0], SPARSITY_SERIES_HEADER);
        assert_eq!(lines.len(), 1 + records.len());
        assert_eq!(lines[1], "1,0.100000,0.050000");
        for (line, r) in lines[1..].iter().zip(&records) {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(f[0] as usize, r.epoch);
            assert_eq!(format!("{:.6}", f[1]), format!("{:.6}", r.weight_sparsity));
            assert_eq!(format!("{:.6}", f[2]), format!("{:.6}", r.channel_sparsity));
        }
        assert_eq!(
            s.channels_per_layer,
            "layer_index,total_channels,surviving_channels\n0,8,5\n1,4,4\n"
        );
        assert!(sparsity_timeseries(&[]).is_err());
    }

    #[test]
    fn metrics_csv_parses_back() {
        let records: Vec<_> = (1..=4)
            .map(|e| record(e, 0.123456789 * e as f64 / 4.0, 0.01 * e as f64))
            .collect();
        let csv = metrics_csv(&records);
        let rows = parse_metrics_csv(&csv).unwrap();
        assert_eq!(rows.len(), 4);
        for (row, r) in rows.iter().zip(&records) {
            assert_eq!(row.epoch, r.epoch);
            assert!((row.weight_sparsity - r.weight_sparsity).abs() <= 5e-7);
            assert!((row.train_loss - r.train_loss).abs() <= 5e-7);
        }
        assert!(parse_metrics_csv("nope\n").is_err());
        let err = parse_metrics_csv(&format!("{METRICS_HEADER}\n1,2\n")).unwrap_err();
        assert!(
            matches!(err, Error::Format { offset, .. } if offset == METRICS_HEADER.len() as u64 + 1)
        );
    }

    fn codes_strategy() -> impl Strategy<Value = (usize, Vec<i8>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(ch, g)| {
            (
                Just(ch),
                prop::collection::vec(prop_oneof![3 => Just(0i8), 1 => -8i8..=8], ch * g),
            )
        })
    }

    proptest! {
        #[test]
        fn channel_sparsity_matches_direct_scan((ch, codes) in codes_strategy()) {
            let g = codes.len() / ch;
            let u = quantized(vec![(vec![ch, g], codes.clone())]);
            let mut dead = 0;
            for c in 0..ch {
                if (0..g).all(|j| codes[c * g + j] == 0) { dead += 1; }
            }
            prop_assert_eq!(channel_sparsity(&u), dead as f64 / ch as f64);
            prop_assert!(channel_sparsity(&u) <= weight_sparsity(&u));
        }
    }
}
