use std::path::Path;

use crate::error::{Error, Result};

/// Per-frame image metrics plus trajectory errors for one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `key=value` pairs written as `#` comment lines before the table.
    pub header: Vec<(String, String)>,
    pub mse_per_frame: Vec<f64>,
    pub ssim_per_frame: Vec<f64>,
    pub rot_err: f64,
    pub trans_err: f64,
    pub cam_mc: f64,
}

impl MetricReport {
    pub fn new(mse_per_frame: Vec<f64>, ssim_per_frame: Vec<f64>, rot_err: f64, trans_err: f64, cam_mc: f64) -> Result<Self> {
        if mse_per_frame.len() != ssim_per_frame.len() {
            return Err(Error::shape("mse and ssim curves differ in length"));
        }
        if mse_per_frame.iter().any(|&m| !(m >= 0.0)) || ssim_per_frame.iter().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::OutOfRange("mse must be >= 0 and ssim in [-1, 1]".into()));
        }
        Ok(Self {
            header: Vec::new(),
            mse_per_frame,
            ssim_per_frame,
            rot_err,
            trans_err,
            cam_mc,
        })
    }

    pub fn with_header(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.header.push((key.into(), value.to_string()));
        self
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn frames(&self) -> usize {
        self.mse_per_frame.len()
    }

    /// Mean MSE over frames `range` (clamped to the clip).
    pub fn mean_mse(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.frames());
        let s = &self.mse_per_frame[range.start.min(end)..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.ssim_per_frame.iter().sum::<f64>() / self.frames().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str("frame,mse,ssim\n");
        for (i, (m, s)) in self.mse_per_frame.iter().zip(&self.ssim_per_frame).enumerate() {
            out.push_str(&format!("{i},{m},{s}\n"));
        }
        out.push_str("rot_err,trans_err,cam_mc\n");
        out.push_str(&format!("{},{},{}\n", self.rot_err, self.trans_err, self.cam_mc));
        out
    }

    pub fn parse_csv(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Parse {
            file: file.to_string(),
            line,
            msg: msg.to_string(),
        };
        let num = |s: &str, line: usize| s.trim().parse::<f64>().map_err(|_| err(line, "bad number"));
        let mut header = Vec::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((_, l)) = lines.peek() {
            match l.strip_prefix('#') {
                Some(rest) => {
                    let (k, v) = rest.trim().split_once('=').unwrap_or((rest.trim(), ""));
                    header.push((k.to_string(), v.to_string()));
                    lines.next();
                }
                None => break,
            }
        }
        match lines.next() {
            Some((_, "frame,mse,ssim")) => {}
            Some((i, _)) => return Err(err(i + 1, "expected 'frame,mse,ssim'")),
            None => return Err(err(0, "empty report")),
        }
        let (mut mse, mut ssim) = (Vec::new(), Vec::new());
        loop {
            let Some((i, l)) = lines.next() else {
                return Err(err(0, "missing trajectory footer"));
            };
            if l == "rot_err,trans_err,cam_mc" {
                break;
            }
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 || f[0].trim().parse::<usize>() != Ok(mse.len()) {
                return Err(err(i + 1, "expected 'frame,mse,ssim' row"));
            }
            mse.push(num(f[1], i + 1)?);
            ssim.push(num(f[2], i + 1)?);
        }
        let (i, l) = lines.next().ok_or_else(|| err(0, "missing trajectory values"))?;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 3 {
            return Err(err(i + 1, "expected three trajectory values"));
        }
        let mut r = Self::new(mse, ssim, num(f[0], i + 1)?, num(f[1], i + 1)?, num(f[2], i + 1)?)?;
        r.header = header;
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let r = MetricReport::new(vec![0.0, 12.5, 1e-3], vec![1.0, 0.5, -0.25], 0.1, 2.0, 3.5)
            .unwrap()
            .with_header("strategy", "furthest")
            .with_header("epipolar_mask", false);
        let text = r.to_csv();
        assert!(text.starts_with("# strategy=furthest\n# epipolar_mask=false\nframe,mse,ssim\n0,0,1\n"));
        assert!(text.ends_with("rot_err,trans_err,cam_mc\n0.1,2,3.5\n"));
        let back = MetricReport::parse_csv(&text, "r.csv").unwrap();
        assert_eq!(back, r);
        assert_eq!(back.header_value("epipolar_mask"), Some("false"));
        assert_eq!(r.mean_mse(1..3), (12.5 + 1e-3) / 2.0);
    }

    #[test]
    fn rejects_invalid_reports() {
        assert!(MetricReport::new(vec![-1.0], vec![0.0], 0.0, 0.0, 0.0).is_err());
        assert!(MetricReport::new(vec![1.0], vec![1.5], 0.0, 0.0, 0.0).is_err());
        assert!(MetricReport::parse_csv("frame,mse,ssim\n0,1,1\n", "x").is_err());
        assert!(matches!(
            MetricReport::parse_csv("frame,mse,ssim\n3,1,1\nrot_err,trans_err,cam_mc\n0,0,0\n", "x"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
