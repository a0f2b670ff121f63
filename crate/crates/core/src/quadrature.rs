//! Adaptive Gauss–Kronrod (7/15) quadrature on finite intervals.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Integrates `f` over `[a, b]` to relative tolerance `rel_tol`.
pub(crate) fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    let mut stack = vec![(a, b, 0usize)];
    let (total0, _) = kronrod(&f, a, b);
    let scale = total0.abs().max(f64::MIN_POSITIVE);
    let mut sum = 0.0;
    while let Some((lo, hi, depth)) = stack.pop() {
        let (val, err) = kronrod(&f, lo, hi);
        let share = (hi - lo) / (b - a);
        if err <= rel_tol * scale * share.max(1e-3) || depth > 40 {
            sum += val;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((mid, hi, depth + 1));
            stack.push((lo, mid, depth + 1));
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_gaussian() {
        let v = integrate(|x| x * x * x, 0.0, 2.0, 1e-14);
        assert!((v - 4.0).abs() < 1e-13);
        let g = integrate(|x| (-0.5 * x * x).exp(), -40.0, 40.0, 1e-14);
        assert!((g - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }
}
