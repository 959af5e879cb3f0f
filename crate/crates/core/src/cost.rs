//! Memory and multiply-accumulate accounting for naive vs factorized guided
//! convolution.
//!
//! For `M` input channels, `N` output channels, kernel size `K` and an
//! `H x W` feature map, the naive kernel holds `M*N*K^2*H*W` values while the
//! factorized pair holds `M*K^2*H*W + M*N`, so
//! `fact / naive = 1/N + 1/(K^2*H*W)` exactly.

use std::fmt::Write as _;
use std::time::Instant;

use num_rational::Ratio;
use rand::Rng;

use crate::error::{Error, Result};
use crate::guided::{
    channelwise_variant_conv, crosschannel_conv, kernel_bytes_allocated, kernels::full_kernel_elems,
    naive_guided_conv, reset_kernel_bytes, ChannelwiseKernels, CrossChannelKernels, FullVariantKernels,
    ORACLE_CAP_ELEMS,
};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const GIB: u128 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub h: u64,
    pub w: u64,
    pub bytes_per_elem: u64,
    pub naive_kernel_elems: u128,
    pub fact_kernel_elems: u128,
    pub naive_bytes: u128,
    pub fact_bytes: u128,
    /// `fact / naive`, exact.
    pub ratio: Ratio<u128>,
    pub naive_macs_per_pixel_channel: u128,
    pub fact_macs_per_pixel_channel: u128,
}

impl CostReport {
    pub fn ratio_f64(&self) -> f64 {
        *self.ratio.numer() as f64 / *self.ratio.denom() as f64
    }

    /// How many times smaller the factorized kernels are.
    pub fn naive_over_fact(&self) -> f64 {
        *self.ratio.denom() as f64 / *self.ratio.numer() as f64
    }

    /// `1/N + 1/(K^2*H*W)` evaluated as an exact rational.
    pub fn closed_form_ratio(&self) -> Ratio<u128> {
        let spatial = (self.k * self.k) as u128 * self.h as u128 * self.w as u128;
        Ratio::new(1, self.n as u128) + Ratio::new(1, spatial)
    }

    /// Aligned text table; GB figures are base 2^30 with the base-10
    /// equivalent alongside.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "M={} N={} K={} H={} B={} bytes/elem={}",
            self.m, self.n, self.k, self.h, self.w, self.bytes_per_elem
        );
        let _ = writeln!(s, "{:<12}{:>16}{:>18}{:>12}{:>12}{:>12}", "path", "kernel elems", "bytes", "GB (2^30)", "GB (10^9)", "MAC/px/ch");
        for (name, elems, bytes, macs) in [
            ("naive", self.naive_kernel_elems, self.naive_bytes, self.naive_macs_per_pixel_channel),
            ("factorized", self.fact_kernel_elems, self.fact_bytes, self.fact_macs_per_pixel_channel),
        ] {
            let _ = writeln!(
                s,
                "{:<12}{:>16}{:>18}{:>12}{:>12}{:>12}",
                name,
                elems,
                bytes,
                render_gib(bytes),
                render_gb10(bytes),
                macs
            );
        }
        let _ = writeln!(
            s,
            "ratio fact/naive = {}/{} = {:.6} (naive is {:.1}x larger)",
            self.ratio.numer(),
            self.ratio.denom(),
            self.ratio_f64(),
            self.naive_over_fact()
        );
        s
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.9}",
            self.m,
            self.n,
            self.k,
            self.h,
            self.w,
            self.naive_bytes,
            self.fact_bytes,
            self.ratio_f64()
        )
    }
}

pub const CSV_HEADER: &str = "M,N,K,H,B,naive_bytes,fact_bytes,ratio";

pub fn analyze(m: u64, n: u64, k: u64, h: u64, w: u64, bytes_per_elem: u64) -> Result<CostReport> {
    if [m, n, k, h, w, bytes_per_elem].contains(&0) {
        return Err(Error::invalid("cost analyze", "all dimensions must be positive"));
    }
    let (m2, n2, k2, h2, w2) = (m as u128, n as u128, (k as u128) * (k as u128), h as u128, w as u128);
    let naive = m2 * n2 * k2 * h2 * w2;
    let fact = m2 * k2 * h2 * w2 + m2 * n2;
    Ok(CostReport {
        m,
        n,
        k,
        h,
        w,
        bytes_per_elem,
        naive_kernel_elems: naive,
        fact_kernel_elems: fact,
        naive_bytes: naive * bytes_per_elem as u128,
        fact_bytes: fact * bytes_per_elem as u128,
        ratio: Ratio::new(fact, naive),
        naive_macs_per_pixel_channel: m2 * k2,
        fact_macs_per_pixel_channel: k2 + m2,
    })
}

/// Bytes in GB of 2^30: one decimal at or above 1 GB, two below.
pub fn render_gib(bytes: u128) -> String {
    let gb = bytes as f64 / GIB as f64;
    if gb >= 1.0 {
        format!("{gb:.1} GB")
    } else {
        format!("{gb:.2} GB")
    }
}

/// Bytes in GB of 10^9, same rounding as [`render_gib`].
pub fn render_gb10(bytes: u128) -> String {
    let gb = bytes as f64 / 1e9;
    if gb >= 1.0 {
        format!("{gb:.1} GB")
    } else {
        format!("{gb:.2} GB")
    }
}

/// Instrumented run of both paths at 32-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub report: CostReport,
    /// `None` when the naive kernels exceed the oracle cap.
    pub naive_alloc_bytes: Option<u128>,
    pub fact_alloc_bytes: u128,
    pub naive_seconds: Option<f64>,
    pub fact_seconds: f64,
}

impl Measurement {
    pub fn summary(&self) -> String {
        let naive = match (self.naive_alloc_bytes, self.naive_seconds) {
            (Some(b), Some(t)) => format!("naive kernel buffers {b} bytes, {t:.6} s"),
            _ => "naive path analytic only (oracle cap exceeded)".to_string(),
        };
        let mut s = format!(
            "{naive}\nfactorized kernel buffers {} bytes, {:.6} s",
            self.fact_alloc_bytes, self.fact_seconds
        );
        if let Some(t) = self.naive_seconds {
            let _ = write!(s, "\nwall-time ratio naive/fact = {:.2}", t / self.fact_seconds.max(1e-12));
        }
        s
    }
}

/// Allocates and applies the kernels of both paths on random data (batch 1),
/// counting kernel-buffer bytes through the guided-kernel constructors.
pub fn measure(m: usize, n: usize, k: usize, h: usize, w: usize, seed: u64) -> Result<Measurement> {
    let report = analyze(m as u64, n as u64, k as u64, h as u64, w as u64, 4)?;
    let mut rng = stream(seed, "cost-measure");
    let s = Tensor::<f32>::from_fn([1, m, h, w], |_| rng.random_range(-1.0..1.0));

    let (naive_alloc_bytes, naive_seconds) = if full_kernel_elems(1, m, n, k, h, w) <= ORACLE_CAP_ELEMS {
        let start = Instant::now();
        reset_kernel_bytes();
        let mut full = FullVariantKernels::<f32>::zeros(1, m, n, k, h, w)?;
        let bytes = kernel_bytes_allocated();
        for v in full.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let out = naive_guided_conv(&s, &full)?;
        std::hint::black_box(&out);
        (Some(bytes), Some(start.elapsed().as_secs_f64()))
    } else {
        (None, None)
    };

    let start = Instant::now();
    reset_kernel_bytes();
    let cw = ChannelwiseKernels::new(
        Tensor::<f32>::from_fn([1, m * k * k, h, w], |_| rng.random_range(-1.0..1.0)),
        k,
    )?;
    let cc = CrossChannelKernels::new(Tensor::from_fn([1, m * n, 1, 1], |_| rng.random_range(-1.0..1.0)), m, n)?;
    let fact_alloc_bytes = kernel_bytes_allocated();
    let out = crosschannel_conv(&channelwise_variant_conv(&s, &cw)?, &cc)?;
    std::hint::black_box(&out);
    let fact_seconds = start.elapsed().as_secs_f64();

    Ok(Measurement {
        report,
        naive_alloc_bytes,
        fact_alloc_bytes,
        naive_seconds,
        fact_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dims_rejected() {
        assert!(analyze(0, 1, 1, 1, 1, 4).is_err());
        assert!(analyze(1, 1, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn rendering() {
        assert_eq!(render_gib(11_475_615_744), "10.7 GB");
        assert_eq!(render_gb10(11_475_615_744), "11.5 GB");
        assert_eq!(render_gib(89_718_784), "0.08 GB");
    }
}
