//! One module per subcommand.

mod eval;
mod gen_data;
mod segment;
mod train;
mod viz_rf;

pub use eval::{cmd_eval, EvalReport, AGGREGATE_ID, METRICS_CSV};
pub use gen_data::{cmd_gen_data, MANIFEST, N_CURVES, WIDTH_RANGE};
pub use segment::{cmd_segment, input_images, MASK_DIR, PROB_DIR};
pub use train::{cmd_train, training_records, TrainOutcome, CHECKPOINT, LOSS_LOG};
pub use viz_rf::{cmd_viz_rf, parse_positions, TapRow, MODES, ORIENTATIONS, RF_CSV, RF_PNG};
