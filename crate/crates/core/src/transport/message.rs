use crate::autodiff::{Real, Tensor};

/// Element type used when a tensor crosses the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireDtype {
    F32,
    F64,
}

impl WireDtype {
    pub fn tag(self) -> u8 {
        match self {
            Self::F32 => 0,
            Self::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// A tensor already rounded to its wire precision, so every transport
/// delivers exactly the same values.
#[derive(Clone, Debug, PartialEq)]
pub struct WireTensor {
    dtype: WireDtype,
    tensor: Tensor,
}

impl WireTensor {
    pub fn new(tensor: Tensor, dtype: WireDtype) -> Self {
        let tensor = match dtype {
            WireDtype::F32 => tensor.map(|v| v as f32 as Real),
            WireDtype::F64 => tensor,
        };
        Self { dtype, tensor }
    }

    pub fn dtype(&self) -> WireDtype {
        self.dtype
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// Bitwise comparison, distinguishing `-0.0` and NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dtype == other.dtype
            && self.tensor.shape() == other.tensor.shape()
            && self.tensor.data().iter().zip(other.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Every exchange of the split protocol. No variant carries images or
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolMessage {
    /// Client head output `[B, D, M]`.
    SmashedUpload { client: u32, round: u32, batch: u32, h: WireTensor },
    /// Pseudo class token `[B, D]` from block `sampled` through the projection.
    PseudoTokenDown { client: u32, round: u32, batch: u32, sampled: u32, b: WireTensor },
    /// Final cls token `[B, D]`.
    ClsTokenDown { client: u32, round: u32, batch: u32, b: WireTensor },
    /// Loss gradient with respect to the downloaded token.
    TailGradUp { client: u32, round: u32, batch: u32, grad: WireTensor },
    /// Loss gradient with respect to the uploaded smashed representation.
    HeadGradDown { client: u32, round: u32, batch: u32, grad: WireTensor },
    /// Client head and tail parameters for a unifying round.
    ParamsUpload { client: u32, round: u32, head: Vec<WireTensor>, tail: Vec<WireTensor> },
    /// Averaged head and tail parameters.
    UnifyBroadcast { round: u32, head: Vec<WireTensor>, tail: Vec<WireTensor> },
    RoundEnd { round: u32 },
    Error { code: u32, detail: String },
}

impl ProtocolMessage {
    pub fn type_code(&self) -> u8 {
        match self {
            Self::SmashedUpload { .. } => 1,
            Self::PseudoTokenDown { .. } => 2,
            Self::ClsTokenDown { .. } => 3,
            Self::TailGradUp { .. } => 4,
            Self::HeadGradDown { .. } => 5,
            Self::UnifyBroadcast { .. } => 6,
            Self::RoundEnd { .. } => 7,
            Self::Error { .. } => 8,
            Self::ParamsUpload { .. } => 9,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::SmashedUpload { .. } => "SmashedUpload",
            Self::PseudoTokenDown { .. } => "PseudoTokenDown",
            Self::ClsTokenDown { .. } => "ClsTokenDown",
            Self::TailGradUp { .. } => "TailGradUp",
            Self::HeadGradDown { .. } => "HeadGradDown",
            Self::UnifyBroadcast { .. } => "UnifyBroadcast",
            Self::RoundEnd { .. } => "RoundEnd",
            Self::Error { .. } => "Error",
            Self::ParamsUpload { .. } => "ParamsUpload",
        }
    }

    fn tensors(&self) -> Vec<&WireTensor> {
        match self {
            Self::SmashedUpload { h: t, .. }
            | Self::PseudoTokenDown { b: t, .. }
            | Self::ClsTokenDown { b: t, .. }
            | Self::TailGradUp { grad: t, .. }
            | Self::HeadGradDown { grad: t, .. } => vec![t],
            Self::ParamsUpload { head, tail, .. } | Self::UnifyBroadcast { head, tail, .. } => {
                head.iter().chain(tail).collect()
            }
            Self::RoundEnd { .. } | Self::Error { .. } => Vec::new(),
        }
    }

    /// Equality that compares tensor payloads bit by bit.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        let mut stripped_self = self.clone();
        let mut stripped_other = other.clone();
        stripped_self.strip();
        stripped_other.strip();
        stripped_self == stripped_other && a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }

    fn strip(&mut self) {
        let empty = || WireTensor::new(Tensor::zeros(vec![0]), WireDtype::F64);
        match self {
            Self::SmashedUpload { h: t, .. }
            | Self::PseudoTokenDown { b: t, .. }
            | Self::ClsTokenDown { b: t, .. }
            | Self::TailGradUp { grad: t, .. }
            | Self::HeadGradDown { grad: t, .. } => *t = empty(),
            Self::ParamsUpload { head, tail, .. } | Self::UnifyBroadcast { head, tail, .. } => {
                head.clear();
                tail.clear();
            }
            Self::RoundEnd { .. } | Self::Error { .. } => {}
        }
    }
}
