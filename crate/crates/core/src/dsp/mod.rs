//! Time-frequency analysis and synthesis, masking, and WAV I/O.

mod istft_op;
mod masks;
mod stft;
mod wav;

pub use istft_op::MaskedIstft;
pub(crate) use masks::psf_value;
pub use masks::{
    active_source_count, apply_mask_resynth, ideal_binary_mask, oracle_psf_mask, MaskTensor, ACTIVITY_RANGE_DB,
    ACTIVITY_RATIO, SILENT_BIN,
};
pub use rustfft::num_complex::Complex64;
pub use stft::{istft, snr_db, sqrt_hann, stft, ComplexSpectrogram, DspConfig, Stft, Waveform};
pub use wav::{read_wav, wav_bytes, write_wav, write_wav_pcm16, write_wav_to};

#[cfg(test)]
mod tests;
