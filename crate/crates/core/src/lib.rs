//! Zero-shot, attention-controlled video editing on top of a latent
//! diffusion denoiser.
//!
//! A clip is encoded to latents, inverted with deterministic DDIM while every
//! cross-attention and sparse-causal spatial-temporal attention map is
//! archived, then denoised twice per step under the edit prompt: a probe pass
//! that produces fresh maps, and a controlled pass whose maps are replaced by
//! word-level swaps of the archived cross maps and by mask-selected rows of
//! the spatial-temporal maps. Long clips are handled as independent
//! non-overlapping windows.
//!
//! The denoiser, latent codec, tokenizer and image/text embedder are traits.
//! Seeded toy implementations make the control logic reproducible bit for bit.
//!
//! | module | contents |
//! |---|---|
//! | [`schedule`] | noise schedule |
//! | [`prompt`] | tokenizer, word alignment, [`prompt::EditSpec`] |
//! | [`store`] | attention maps and the on-disk map archive |
//! | [`attention`] | attention layers, hooks, toy denoisers |
//! | [`scheduler`] | DDIM steps, inversion and sampling loops |
//! | [`control`] | cross blending, blending masks, spatial blending |
//! | [`pipeline`] | window editing and the long-video driver |
//! | [`metrics`] | temporal consistency and frame accuracy |
//! | [`cli`] | job configuration and the command implementations |

pub mod attention;
pub mod cli;
pub mod control;
pub mod error;
mod hash;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod schedule;
pub mod scheduler;
pub mod store;

pub use attention::{
    build_toy_denoiser, AttentionHook, ConstantDenoiser, DenoiserBackend, PassThrough, ToyDenoiser,
};
pub use control::{make_controller, AttentionController};
pub use error::{Error, Result};
pub use latent::LatentVideo;
pub use prompt::{align_edit_words, EditSpec, TokenizedPrompt, Tokenizer, WordTokenizer};
pub use schedule::{build_schedule, NoiseSchedule};
pub use store::{AttentionMap, AttentionStore, MapKey, MapKind};
