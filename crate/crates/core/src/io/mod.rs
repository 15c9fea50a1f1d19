//! File formats: Middlebury `.flo`, binary PPM/PGM, and flow visualization.

mod color;
mod flo;
mod pnm;

pub use color::{color_wheel, flow_to_color, MaxNorm};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_SENTINEL};
pub use pnm::{
    decode_pnm, encode_pgm, encode_ppm, quantize, read_pgm, read_pnm, read_ppm, write_pgm,
    write_pgm_bytes, write_ppm, Pnm,
};
