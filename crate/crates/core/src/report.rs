//! Number formatting and key=value header helpers shared by CSV writers.

/// Format with 12 significant digits, `%.12g` style.
pub fn fmt12(x: f64) -> String {
    fmt_sig(x, 12)
}

/// Format with `sig` significant digits, fixed or scientific like C's `%g`.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= sig as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { "-" } else { "+" };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Parse `key=value` tokens separated by whitespace.
pub fn parse_header_fields(line: &str) -> Vec<(String, String)> {
    line.split_whitespace().filter_map(|tok| tok.split_once('=').map(|(k, v)| (k.to_string(), v.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_c_style_general_format() {
        assert_eq!(fmt12(16.0 / 3.0), "5.33333333333");
        assert_eq!(fmt12(0.0), "0");
        assert_eq!(fmt12(3.0), "3");
        assert_eq!(fmt12(-0.25), "-0.25");
        assert_eq!(fmt12(1.5e-7), "1.5e-07");
        assert_eq!(fmt12(1e12), "1e+12");
        assert_eq!(fmt12(123456789012.0), "123456789012");
        assert_eq!(fmt12(0.0001), "0.0001");
        assert_eq!(fmt12(0.000012345), "1.2345e-05");
        assert_eq!(fmt12(f64::NAN), "nan");
    }

    #[test]
    fn header_fields() {
        let f = parse_header_fields("# kernel q=4 d=1 kind=K");
        assert_eq!(f, vec![("q".into(), "4".into()), ("d".into(), "1".into()), ("kind".into(), "K".into())]);
    }
}
