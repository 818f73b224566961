use std::io::{Read, Write};

use super::geometry::{Geometry, Region};
use super::LeafBinning;
use crate::error::{Error, Result};
use crate::scalar::Marker;

/// True when the two cells overlap in every dimension other than `skip`.
fn overlaps_off<S: Marker>(a: &Region<S>, b: &Region<S>, skip: usize) -> bool {
    (0..a.dims()).filter(|&d| d != skip).all(|d| {
        (a.lo[d] == b.lo[d] && a.hi[d] == b.hi[d]) || a.lo[d].max(b.lo[d]) < a.hi[d].min(b.hi[d])
    })
}

/// Test outcome attached to a leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafStatus {
    /// P-value of the leaf's own layer-1 test.
    pub p_first_tested: f64,
    pub rejected: bool,
    /// 1-based layer at which the leaf was covered by a rejection.
    pub rejection_layer: Option<usize>,
}

/// Flat per-leaf table: bounds, counts and optionally test outcomes.
///
/// Written as delimited text with a 1-based `leaf_id` column, one
/// `lo_<marker>`/`hi_<marker>` pair per dimension, `n`, `X`, `Xtilde` and,
/// when present, `p_first_tested`, `rejected`, `rejection_layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafTable<S> {
    pub marker_names: Vec<String>,
    pub regions: Vec<Region<S>>,
    pub n: Vec<u64>,
    pub x: Vec<u64>,
    pub x_tilde: Vec<u64>,
    pub status: Option<Vec<LeafStatus>>,
}

impl<S: Marker> LeafTable<S> {
    pub fn from_binning(binning: &LeafBinning<S>) -> Self {
        Self {
            marker_names: binning.marker_names().to_vec(),
            regions: binning.regions().to_vec(),
            n: binning.n().to_vec(),
            x: binning.x().to_vec(),
            x_tilde: binning.x_tilde().to_vec(),
            status: None,
        }
    }

    pub fn with_status(mut self, status: Vec<LeafStatus>) -> Result<Self> {
        if status.len() != self.n.len() {
            return Err(Error::Shape(format!(
                "{} leaves but {} status rows",
                self.n.len(),
                status.len()
            )));
        }
        self.status = Some(status);
        Ok(self)
    }

    pub fn leaf_count(&self) -> usize {
        self.n.len()
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["leaf_id".to_string()];
        for name in &self.marker_names {
            header.push(format!("lo_{name}"));
            header.push(format!("hi_{name}"));
        }
        header.extend(["n", "X", "Xtilde"].map(String::from));
        if self.status.is_some() {
            header.extend(["p_first_tested", "rejected", "rejection_layer"].map(String::from));
        }
        w.write_record(&header)?;
        for (i, r) in self.regions.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            for d in 0..r.dims() {
                rec.push(r.lo[d].to_string());
                rec.push(r.hi[d].to_string());
            }
            rec.push(self.n[i].to_string());
            rec.push(self.x[i].to_string());
            rec.push(self.x_tilde[i].to_string());
            if let Some(status) = &self.status {
                let s = &status[i];
                rec.push(s.p_first_tested.to_string());
                rec.push(u8::from(s.rejected).to_string());
                rec.push(s.rejection_layer.map(|l| l.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Parses a table written by [`LeafTable::write`]. Which upper edges
    /// are closed is recovered from the bounds: a cell is closed along a
    /// dimension when its `hi` is the largest there, unless it is an empty
    /// zero-width cell or an occupied zero-width cell sits on that edge
    /// above it.
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let id_col = col("leaf_id")?;
        let marker_names: Vec<String> = header
            .iter()
            .filter_map(|h| h.strip_prefix("lo_").map(str::to_string))
            .collect();
        if marker_names.is_empty() {
            return Err(Error::LeafTable("no lo_<marker> columns".into()));
        }
        let bound_cols = marker_names
            .iter()
            .map(|m| Ok((col(&format!("lo_{m}"))?, col(&format!("hi_{m}"))?)))
            .collect::<Result<Vec<_>>>()?;
        let (n_col, x_col, xt_col) = (col("n")?, col("X")?, col("Xtilde")?);
        let status_cols = match (
            col("p_first_tested"),
            col("rejected"),
            col("rejection_layer"),
        ) {
            (Ok(p), Ok(r), Ok(l)) => Some((p, r, l)),
            _ => None,
        };

        let mut t = LeafTable {
            marker_names,
            regions: Vec::new(),
            n: Vec::new(),
            x: Vec::new(),
            x_tilde: Vec::new(),
            status: status_cols.map(|_| Vec::new()),
        };
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| -> Result<&str> {
                rec.get(c)
                    .map(str::trim)
                    .ok_or_else(|| Error::LeafTable(format!("row {} is short", row + 1)))
            };
            let num = |c: usize| -> Result<u64> {
                field(c)?.parse().map_err(|_| Error::NonNumeric {
                    row: row + 1,
                    column: header[c].clone(),
                })
            };
            if num(id_col)? != row as u64 + 1 {
                return Err(Error::LeafTable(format!(
                    "leaf ids must run 1..m in order; row {} has {}",
                    row + 1,
                    field(id_col)?
                )));
            }
            let mut lo = Vec::with_capacity(bound_cols.len());
            let mut hi = Vec::with_capacity(bound_cols.len());
            for &(l, h) in &bound_cols {
                for (c, out) in [(l, &mut lo), (h, &mut hi)] {
                    let v: S = field(c)?.parse().map_err(|_| Error::NonNumeric {
                        row: row + 1,
                        column: header[c].clone(),
                    })?;
                    out.push(v);
                }
            }
            let (n, x, xt) = (num(n_col)?, num(x_col)?, num(xt_col)?);
            if n != x + xt {
                return Err(Error::LeafTable(format!(
                    "leaf {}: n = {n} but X + Xtilde = {}",
                    row + 1,
                    x + xt
                )));
            }
            let p = lo.len();
            t.regions.push(Region {
                lo,
                hi,
                closed_hi: vec![false; p],
            });
            t.n.push(n);
            t.x.push(x);
            t.x_tilde.push(xt);
            if let (Some((pc, rc, lc)), Some(status)) = (status_cols, t.status.as_mut()) {
                let bad = |c: usize| Error::NonNumeric {
                    row: row + 1,
                    column: header[c].clone(),
                };
                let p_first_tested = field(pc)?.parse().map_err(|_| bad(pc))?;
                let rejected = match field(rc)? {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(bad(rc)),
                };
                let layer = field(lc)?;
                let rejection_layer = if layer.is_empty() {
                    None
                } else {
                    Some(layer.parse().map_err(|_| bad(lc))?)
                };
                status.push(LeafStatus {
                    p_first_tested,
                    rejected,
                    rejection_layer,
                });
            }
        }
        if t.regions.is_empty() {
            return Err(Error::LeafTable("no leaves".into()));
        }
        let p = t.marker_names.len();
        for d in 0..p {
            let top = t
                .regions
                .iter()
                .map(|r| r.hi[d])
                .fold(S::neg_infinity(), S::max);
            // occupied zero-width cells sitting on the top edge own it
            let caps: Vec<usize> = (0..t.regions.len())
                .filter(|&i| {
                    let r = &t.regions[i];
                    r.lo[d] == top && r.hi[d] == top && t.n[i] > 0
                })
                .collect();
            let closed: Vec<bool> = (0..t.regions.len())
                .map(|i| {
                    let r = &t.regions[i];
                    if r.hi[d] != top {
                        return false;
                    }
                    if r.lo[d] == r.hi[d] {
                        return t.n[i] > 0;
                    }
                    !caps.iter().any(|&c| overlaps_off(&t.regions[c], r, d))
                })
                .collect();
            for (r, c) in t.regions.iter_mut().zip(closed) {
                r.closed_hi[d] = c;
            }
        }
        Ok(t)
    }

    /// Point-location structure for the table's leaves.
    pub fn geometry(&self) -> Result<Geometry<S>> {
        Geometry::from_regions(self.regions.clone())
    }

    /// Reassembles a [`LeafBinning`] (dimension order is taken as column
    /// order).
    pub fn to_binning(&self) -> Result<LeafBinning<S>> {
        LeafBinning::from_counts(
            self.geometry()?,
            self.x.clone(),
            self.x_tilde.clone(),
            (0..self.marker_names.len()).collect(),
            self.marker_names.clone(),
        )
    }
}
