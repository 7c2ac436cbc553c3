use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::model::{encode_images, encode_texts, VLModel};
use crate::tensor::{l2_normalize, Tensor};
use crate::tensorfile::{self, Bundle, PayloadKind, MAGIC};

/// Where a feature row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
    Oti,
    Ovi,
    Adapter,
    /// Weighted blend of a native and an inverted feature.
    Mixed,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Image,
        Modality::Text,
        Modality::Oti,
        Modality::Ovi,
        Modality::Adapter,
        Modality::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Oti => "oti",
            Modality::Ovi => "ovi",
            Modality::Adapter => "adapter",
            Modality::Mixed => "mixed",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {s:?}")))
    }
}

/// Labeled, unit-normalized feature rows of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub modality: Modality,
    ids: Vec<u64>,
    labels: Vec<usize>,
    features: Tensor,
}

impl FeatureSet {
    /// Normalizes every row of `features` (`[n, d]`).
    pub fn new(modality: Modality, ids: Vec<u64>, labels: Vec<usize>, features: Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] != ids.len() || s[0] != labels.len() {
            return Err(Error::shape(
                "feature_set",
                format!("{s:?} with {} ids and {} labels", ids.len(), labels.len()),
            ));
        }
        let d = s[1];
        let mut data = Vec::with_capacity(features.numel());
        for row in features.data().chunks(d) {
            data.extend(l2_normalize(row)?);
        }
        let features = Tensor::new(s.to_vec(), data)?;
        Ok(Self { modality, ids, labels, features })
    }

    pub fn from_rows(modality: Modality, ids: Vec<u64>, labels: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("feature_set", "ragged rows"));
        }
        let n = rows.len();
        let t = Tensor::new(vec![n, d], rows.concat())?;
        Self::new(modality, ids, labels, t)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let rows = indices.iter().map(|&i| self.row(i).to_vec()).collect();
        let ids = indices.iter().map(|&i| self.ids[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::from_rows(self.modality, ids, labels, rows)
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    /// Image features of `samples`, keyed by sample id.
    pub fn encode_images(model: &VLModel, samples: &[&Sample]) -> Result<Self> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let f = encode_images(model, &images)?;
        Self::new(
            Modality::Image,
            samples.iter().map(|s| s.id).collect(),
            samples.iter().map(|s| s.label).collect(),
            f,
        )
    }

    /// Text features of caption `caption` of every sample, keyed by sample id.
    pub fn encode_captions(model: &VLModel, samples: &[&Sample], caption: usize) -> Result<Self> {
        let texts = samples
            .iter()
            .map(|s| {
                s.captions.get(caption).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {} has no caption {caption}", s.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let f = encode_texts(model, &texts)?;
        Self::new(
            Modality::Text,
            samples.iter().map(|s| s.id).collect(),
            samples.iter().map(|s| s.label).collect(),
            f,
        )
    }

    /// Text features of one prompt per class; ids and labels are the class index.
    pub fn encode_prompts(model: &VLModel, prompts: &[Vec<usize>]) -> Result<Self> {
        let f = encode_texts(model, prompts)?;
        let n = prompts.len();
        Self::new(Modality::Text, (0..n as u64).collect(), (0..n).collect(), f)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,modality,label\n");
        for i in 0..self.len() {
            let _ = write!(out, "{},{},{}", self.ids[i], self.modality.name(), self.labels[i]);
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("id,modality,label") {
            return Err(Error::Format("feature CSV must start with `id,modality,label`".into()));
        }
        let (mut ids, mut labels, mut rows, mut modality) = (Vec::new(), Vec::new(), Vec::new(), None);
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Format(format!("feature CSV row {}: bad {what}", n + 1));
            let mut fields = line.split(',');
            let id = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(|| bad("id"))?;
            let m = Modality::from_name(fields.next().ok_or_else(|| bad("modality"))?.trim())
                .map_err(|_| bad("modality"))?;
            if *modality.get_or_insert(m) != m {
                return Err(bad("modality (mixed within one file)"));
            }
            let label = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(|| bad("label"))?;
            let row = fields
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad("value")))
                .collect::<Result<Vec<_>>>()?;
            ids.push(id);
            labels.push(label);
            rows.push(row);
        }
        let modality = modality.ok_or_else(|| Error::Format("feature CSV has no rows".into()))?;
        Self::from_rows(modality, ids, labels, rows)
    }

    fn to_bundle(&self) -> Result<Bundle> {
        let n = self.len();
        Ok(Bundle {
            kind: PayloadKind::Features,
            header: format!("modality={}", self.modality.name()).into_bytes(),
            tensors: vec![
                ("ids".into(), Tensor::new(vec![n], self.ids.iter().map(|&i| i as f64).collect())?),
                ("labels".into(), Tensor::new(vec![n], self.labels.iter().map(|&l| l as f64).collect())?),
                ("features".into(), self.features.clone()),
            ],
        })
    }

    fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.kind != PayloadKind::Features {
            return Err(Error::Format("not a feature file".into()));
        }
        let header = std::str::from_utf8(&b.header).map_err(|_| Error::Format("bad header".into()))?;
        let m = header
            .strip_prefix("modality=")
            .ok_or_else(|| Error::Format("feature header lacks modality".into()))?;
        let as_ints = |t: &Tensor| t.data().iter().map(|&v| v as u64).collect::<Vec<_>>();
        let ids = as_ints(b.tensor("ids")?);
        let labels = as_ints(b.tensor("labels")?).into_iter().map(|l| l as usize).collect();
        Self::new(Modality::from_name(m)?, ids, labels, b.tensor("features")?.clone())
    }

    /// Writes CSV unless the path ends in `.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "bin") {
            tensorfile::save(path, &self.to_bundle()?)
        } else {
            Ok(fs::write(path, self.to_csv())?)
        }
    }

    /// Reads either format, sniffing the binary magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::from_bundle(&tensorfile::read_bundle(&mut bytes.as_slice())?)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format("feature file is not UTF-8".into()))?;
            Self::from_csv(&text)
        }
    }
}
