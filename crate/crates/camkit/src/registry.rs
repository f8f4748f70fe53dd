//! Catalog of distinct channels and per-dataset channel orderings.
//!
//! Every dataset contributes an ordered list of channels (its channel set);
//! the union of all channels is what per-channel strategies key their
//! parameters by. The default registry mirrors the benchmark layout:
//! a 3-channel, a 4-channel, and a 5-channel source, 12 distinct channels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// One channel of one dataset, optionally tagged with a semantic alias
/// (e.g. "nucleus") shared across datasets.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId {
    pub dataset: String,
    pub index: u16,
    pub alias: Option<String>,
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.dataset, self.index)
    }
}

/// Key under which a channel's parameters are stored. With alias sharing
/// enabled, channels with equal aliases collapse onto one key.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Channel(String, u16),
    Alias(String),
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::Channel(d, i) => write!(f, "{d}:{i}"),
            ParamKey::Alias(a) => write!(f, "alias:{a}"),
        }
    }
}

/// Global catalog of datasets and their channel orderings.
#[derive(Clone, Debug, Default)]
pub struct ChannelRegistry {
    datasets: BTreeMap<String, Vec<ChannelId>>,
    /// Share parameters between channels whose aliases match.
    pub share_aliases: bool,
}

impl ChannelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The benchmark's default layout: WTC (3 channels), HPA (4), CP (5);
    /// 12 distinct channels in total.
    pub fn chammi_default() -> Self {
        let mut r = Self::new();
        r.add_dataset("WTC", &["membrane", "nucleus", "protein"]).unwrap();
        r.add_dataset("HPA", &["microtubules", "nucleus", "er", "protein"])
            .unwrap();
        r.add_dataset("CP", &["dna", "er", "rna", "agp", "mito"]).unwrap();
        r
    }

    pub fn add_dataset(&mut self, dataset: &str, aliases: &[&str]) -> Result<()> {
        if aliases.is_empty() {
            return Err(Error::contract(format!("dataset {dataset} has no channels")));
        }
        if self.datasets.contains_key(dataset) {
            return Err(Error::contract(format!("dataset {dataset} already registered")));
        }
        let channels = aliases
            .iter()
            .enumerate()
            .map(|(i, a)| ChannelId {
                dataset: dataset.to_string(),
                index: i as u16,
                alias: if a.is_empty() {
                    None
                } else {
                    Some((*a).to_string())
                },
            })
            .collect();
        self.datasets.insert(dataset.to_string(), channels);
        Ok(())
    }

    pub fn add_dataset_unnamed(&mut self, dataset: &str, channels: usize) -> Result<()> {
        let aliases = vec![""; channels];
        self.add_dataset(dataset, &aliases)
    }

    pub fn datasets(&self) -> impl Iterator<Item = (&String, &Vec<ChannelId>)> {
        self.datasets.iter()
    }

    pub fn dataset_names(&self) -> Vec<String> {
        self.datasets.keys().cloned().collect()
    }

    pub fn channel_set(&self, dataset: &str) -> Result<&[ChannelId]> {
        self.datasets
            .get(dataset)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownChannel(format!("dataset {dataset} not registered")))
    }

    pub fn channel_count(&self, dataset: &str) -> Result<usize> {
        Ok(self.channel_set(dataset)?.len())
    }

    /// All distinct parameter keys in deterministic order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys: Vec<ParamKey> = Vec::new();
        for channels in self.datasets.values() {
            for ch in channels {
                let key = self.param_key(ch);
                if !keys.contains(&key) {
                    keys.push(key);
                }
            }
        }
        keys.sort();
        keys
    }

    pub fn param_key(&self, ch: &ChannelId) -> ParamKey {
        match (&ch.alias, self.share_aliases) {
            (Some(a), true) => ParamKey::Alias(a.clone()),
            _ => ParamKey::Channel(ch.dataset.clone(), ch.index),
        }
    }

    /// Number of distinct channels (parameter keys).
    pub fn distinct_channels(&self) -> usize {
        self.param_keys().len()
    }

    /// Load from a CSV with columns `dataset,channel_index,alias`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let mut rows: Vec<(String, u16, String)> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() < 2 {
                return Err(Error::format(format!(
                    "registry row needs dataset,channel_index[,alias]: {record:?}"
                )));
            }
            let dataset = record[0].to_string();
            let index: u16 = record[1]
                .parse()
                .map_err(|_| Error::format(format!("bad channel_index {:?}", &record[1])))?;
            let alias = record.get(2).unwrap_or("").to_string();
            rows.push((dataset, index, alias));
        }
        let mut grouped: BTreeMap<String, Vec<(u16, String)>> = BTreeMap::new();
        for (d, i, a) in rows {
            grouped.entry(d).or_default().push((i, a));
        }
        let mut reg = Self::new();
        for (dataset, mut chans) in grouped {
            chans.sort_by_key(|(i, _)| *i);
            for (pos, (i, _)) in chans.iter().enumerate() {
                if *i as usize != pos {
                    return Err(Error::format(format!(
                        "dataset {dataset}: channel indices must be 0..n, found {i} at position {pos}"
                    )));
                }
            }
            let aliases: Vec<&str> = chans.iter().map(|(_, a)| a.as_str()).collect();
            reg.add_dataset(&dataset, &aliases)?;
        }
        Ok(reg)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["dataset", "channel_index", "alias"])?;
        for (dataset, channels) in &self.datasets {
            for ch in channels {
                wtr.write_record([
                    dataset.as_str(),
                    &ch.index.to_string(),
                    ch.alias.as_deref().unwrap_or(""),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chammi_default_has_twelve_distinct_channels() {
        let r = ChannelRegistry::chammi_default();
        assert_eq!(r.channel_count("WTC").unwrap(), 3);
        assert_eq!(r.channel_count("HPA").unwrap(), 4);
        assert_eq!(r.channel_count("CP").unwrap(), 5);
        assert_eq!(r.distinct_channels(), 12);
    }

    #[test]
    fn alias_sharing_merges_keys() {
        let mut r = ChannelRegistry::chammi_default();
        r.share_aliases = true;
        // nucleus appears twice, er twice, protein twice
        assert_eq!(r.distinct_channels(), 9);
    }

    #[test]
    fn unknown_dataset_is_an_error() {
        let r = ChannelRegistry::chammi_default();
        assert!(matches!(
            r.channel_set("LIVER"),
            Err(Error::UnknownChannel(_))
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.csv");
        let r = ChannelRegistry::chammi_default();
        r.to_csv(&path).unwrap();
        let r2 = ChannelRegistry::from_csv(&path).unwrap();
        assert_eq!(r2.distinct_channels(), 12);
        assert_eq!(r2.channel_set("HPA").unwrap(), r.channel_set("HPA").unwrap());
    }

    #[test]
    fn duplicate_dataset_rejected() {
        let mut r = ChannelRegistry::new();
        r.add_dataset("A", &["x"]).unwrap();
        assert!(r.add_dataset("A", &["y"]).is_err());
    }
}
