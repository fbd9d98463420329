use tokencodec::CodecError;

/// Bad arguments, missing inputs, unreadable files.
#[derive(Debug)]
pub struct Usage(pub String);

/// Files that were each valid but do not belong together.
#[derive(Debug)]
pub struct Incompatible(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for Incompatible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for Incompatible {}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INCOMPATIBLE: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if cause.is::<Incompatible>() {
            return EXIT_INCOMPATIBLE;
        }
        if let Some(e) = cause.downcast_ref::<CodecError>() {
            return match e {
                CodecError::ModelMismatch { .. } => EXIT_INCOMPATIBLE,
                CodecError::TrainingDiverged { .. } => EXIT_INTERNAL,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_INTERNAL
}
