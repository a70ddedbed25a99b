//! A small differentiable-layer toolkit: dense `f32` tensors, a recorded
//! reverse-mode tape, and the handful of layers a conditional video GAN
//! needs (dense, 2D/3D convolution, batch and conditional batch
//! normalization, pooling, upsampling, Sobel edges, spectral normalization).
//!
//! ```
//! use pathvid_nn::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), true);
//! let w = g.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap());
//! let y = g.matmul(x, w).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 3.0]);
//! ```

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod param;
pub mod session;
pub mod suite;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{sigmoid, softmax_rows, BatchStats, Gradients, Graph, Var};
pub use layers::{
    BatchNorm, Builder, CondBatchNorm, Conv, Dense, LayerConfig, LayerKind, RunningStats, BN_EPS,
    LEAKY_SLOPE,
};
pub use param::{orthogonal, ParamId, ParamKind, ParamStore, Parameter, SpectralState};
pub use session::{BufferUpdates, NormMode, Session};
pub use tensor::Tensor;
