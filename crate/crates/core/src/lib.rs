//! Generative interpretation of frozen binary image classifiers.
//!
//! The crate trains a pair of U-shaped generators against a frozen
//! convolutional classifier: the main generator forges inputs the classifier
//! flips to the negative class, the assistant forges the inverse, and the
//! difference image between the main generator's output and its input becomes
//! a per-channel activation map of the regions the classifier actually uses.
//! A deterministic synthetic phantom dataset with planted, mask-annotated
//! lesions makes every claim checkable at desk scale: overlap metrics against
//! ground-truth masks, attribution baselines, parameter/label randomization
//! sanity checks, a planted-bias experiment, and loss ablations.
//!
//! Everything runs on the CPU. Data-parallel inner loops (convolutions,
//! per-scan map extraction, dataset synthesis) go through [`par`], which uses
//! rayon when the default `parallel` feature is enabled and plain sequential
//! iteration otherwise; both paths produce bitwise-identical results.




pub mod diffcore;



pub mod bam;
pub mod classifier;
pub mod generator;
pub mod imgproc;
pub mod par;
pub mod phantom;


