//! Region-by-day panel data: counts, offsets, confounders, exposures, and the
//! link to the adjacency structure.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spatial::{parse_edge_list, CarStructure};
use crate::util::RowMatrix;

/// Column roles for the dataset file; roles are declared, never inferred.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct ColumnRoles {
    pub region: String,
    pub date: String,
    pub count: String,
    pub population: String,
    pub confounders: Vec<String>,
    pub exposures: Vec<String>,
}

impl Default for ColumnRoles {
    fn default() -> Self {
        Self {
            region: "region_id".to_string(),
            date: "date_index".to_string(),
            count: "count".to_string(),
            population: "population".to_string(),
            confounders: Vec::new(),
            exposures: Vec::new(),
        }
    }
}

/// One fully validated panel.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    /// Region ids in canonical (sorted) order; `region_index` points here.
    pub region_ids: Vec<String>,
    /// Per-row region index.
    pub region_index: Vec<usize>,
    pub date_index: Vec<i64>,
    pub counts: Vec<u64>,
    pub log_population: Vec<f64>,
    pub confounders: RowMatrix,
    pub exposures: RowMatrix,
    pub confounder_names: Vec<String>,
    pub exposure_names: Vec<String>,
    /// Observed `(min, max)` per exposure column, fixed at load time for
    /// cutpoint ranges.
    pub exposure_ranges: Vec<(f64, f64)>,
}

impl PanelDataset {
    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_confounders(&self) -> usize {
        self.confounder_names.len()
    }

    pub fn n_exposures(&self) -> usize {
        self.exposure_names.len()
    }

    pub fn exposure_index(&self, name: &str) -> Result<usize> {
        self.exposure_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::Data(format!(
                    "unknown exposure `{name}`; valid names: {}",
                    self.exposure_names.join(", ")
                ))
            })
    }

    /// Builds a panel from already-assembled columns (simulation path).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        region_ids: Vec<String>,
        region_index: Vec<usize>,
        date_index: Vec<i64>,
        counts: Vec<u64>,
        population: Vec<f64>,
        confounders: RowMatrix,
        exposures: RowMatrix,
        confounder_names: Vec<String>,
        exposure_names: Vec<String>,
    ) -> Result<Self> {
        let n = counts.len();
        if region_index.len() != n
            || date_index.len() != n
            || population.len() != n
            || confounders.rows() != n
            || exposures.rows() != n
        {
            return Err(Error::Data("column lengths differ".to_string()));
        }
        if let Some(i) = population.iter().position(|&p| !(p > 0.0)) {
            return Err(Error::Data(format!("row {i}: population must be positive")));
        }
        let exposure_ranges = exposures.column_ranges();
        Ok(Self {
            region_ids,
            region_index,
            date_index,
            counts,
            log_population: population.iter().map(|p| p.ln()).collect(),
            confounders,
            exposures,
            confounder_names,
            exposure_names,
            exposure_ranges,
        })
    }

    /// Reads the dataset CSV. Every declared column must exist; cells must be
    /// complete and parse; region ids are canonicalized in sorted order.
    pub fn from_csv_str(text: &str, roles: &ColumnRoles) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Data(format!("bad CSV header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let col = |name: &str| -> Result<usize> {
            headers.iter().position(|h| h == name).ok_or_else(|| {
                Error::Data(format!(
                    "column `{name}` not found in dataset header ({})",
                    headers.join(", ")
                ))
            })
        };
        let region_col = col(&roles.region)?;
        let date_col = col(&roles.date)?;
        let count_col = col(&roles.count)?;
        let pop_col = col(&roles.population)?;
        let conf_cols: Vec<usize> = roles
            .confounders
            .iter()
            .map(|n| col(n))
            .collect::<Result<_>>()?;
        let expo_cols: Vec<usize> = roles
            .exposures
            .iter()
            .map(|n| col(n))
            .collect::<Result<_>>()?;
        if expo_cols.is_empty() {
            return Err(Error::Config("no exposure columns declared".to_string()));
        }

        let mut region_raw: Vec<String> = Vec::new();
        let mut date_index = Vec::new();
        let mut counts = Vec::new();
        let mut population = Vec::new();
        let mut conf_rows: Vec<Vec<f64>> = Vec::new();
        let mut expo_rows: Vec<Vec<f64>> = Vec::new();

        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Data(format!("CSV row {}: {e}", line + 2)))?;
            let cell = |idx: usize| -> Result<&str> {
                record.get(idx).map(str::trim).ok_or_else(|| {
                    Error::Data(format!("CSV row {}: missing cell {idx}", line + 2))
                })
            };
            let parse_f64 = |idx: usize| -> Result<f64> {
                let s = cell(idx)?;
                s.parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "CSV row {}: cannot parse `{s}` in column `{}`",
                        line + 2,
                        headers[idx]
                    ))
                })
            };
            region_raw.push(cell(region_col)?.to_string());
            date_index.push(parse_f64(date_col)? as i64);
            let y = parse_f64(count_col)?;
            if y < 0.0 || y.fract() != 0.0 {
                return Err(Error::Data(format!(
                    "CSV row {}: count must be a nonnegative integer, got {y}",
                    line + 2
                )));
            }
            counts.push(y as u64);
            population.push(parse_f64(pop_col)?);
            conf_rows.push(conf_cols.iter().map(|&c| parse_f64(c)).collect::<Result<_>>()?);
            expo_rows.push(expo_cols.iter().map(|&c| parse_f64(c)).collect::<Result<_>>()?);
        }
        if counts.is_empty() {
            return Err(Error::Data("dataset has no rows".to_string()));
        }

        let mut id_map: BTreeMap<String, usize> = BTreeMap::new();
        for id in &region_raw {
            let next = id_map.len();
            id_map.entry(id.clone()).or_insert(next);
        }
        // Canonical order is sorted; remap indices accordingly.
        let region_ids: Vec<String> = id_map.keys().cloned().collect();
        let lookup: BTreeMap<&str, usize> = region_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let region_index: Vec<usize> = region_raw.iter().map(|id| lookup[id.as_str()]).collect();

        let confounders = if conf_rows.iter().all(|r| r.is_empty()) {
            RowMatrix::zeros(counts.len(), 0)
        } else {
            RowMatrix::from_rows(&conf_rows)
        };
        Self::from_parts(
            region_ids,
            region_index,
            date_index,
            counts,
            population,
            confounders,
            RowMatrix::from_rows(&expo_rows),
            roles.confounders.clone(),
            roles.exposures.clone(),
        )
    }

    pub fn from_csv_path(path: &Path, roles: &ColumnRoles) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_csv_str(&text, roles)
    }

    /// Builds the CAR structure from a named edge list, checking that ids
    /// match the dataset's regions exactly.
    pub fn build_car(&self, edges: &[(String, String)]) -> Result<CarStructure> {
        let lookup: BTreeMap<&str, usize> = self
            .region_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut index_edges = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            let ia = *lookup.get(a.as_str()).ok_or_else(|| {
                Error::Data(format!("adjacency references unknown region id `{a}`"))
            })?;
            let ib = *lookup.get(b.as_str()).ok_or_else(|| {
                Error::Data(format!("adjacency references unknown region id `{b}`"))
            })?;
            index_edges.push((ia, ib));
        }
        CarStructure::from_edges(self.n_regions(), &index_edges)
    }

    pub fn build_car_from_text(&self, text: &str) -> Result<CarStructure> {
        self.build_car(&parse_edge_list(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roles() -> ColumnRoles {
        ColumnRoles {
            confounders: vec!["x1".into()],
            exposures: vec!["z1".into(), "z2".into()],
            ..ColumnRoles::default()
        }
    }

    const CSV: &str = "\
region_id,date_index,count,population,x1,z1,z2
B,0,3,100,0.5,0.1,0.9
A,0,1,50,0.2,0.4,0.3
B,1,0,100,0.6,0.2,0.8
A,1,2,50,0.1,0.5,0.2
";

    #[test]
    fn loads_and_canonicalizes_regions() {
        let data = PanelDataset::from_csv_str(CSV, &roles()).unwrap();
        assert_eq!(data.rows(), 4);
        assert_eq!(data.region_ids, vec!["A", "B"]);
        assert_eq!(data.region_index, vec![1, 0, 1, 0]);
        assert_eq!(data.counts, vec![3, 1, 0, 2]);
        assert_eq!(data.exposure_ranges[0], (0.1, 0.5));
    }

    #[test]
    fn missing_column_is_a_data_error() {
        let mut r = roles();
        r.exposures.push("z9".into());
        let err = PanelDataset::from_csv_str(CSV, &r).unwrap_err();
        assert!(format!("{err}").contains("z9"));
    }

    #[test]
    fn negative_count_rejected() {
        let bad = CSV.replace("B,0,3,100", "B,0,-3,100");
        assert!(PanelDataset::from_csv_str(&bad, &roles()).is_err());
    }

    #[test]
    fn nonpositive_population_rejected() {
        let bad = CSV.replace("A,0,1,50", "A,0,1,0");
        assert!(PanelDataset::from_csv_str(&bad, &roles()).is_err());
    }

    #[test]
    fn adjacency_with_unknown_region_rejected() {
        let data = PanelDataset::from_csv_str(CSV, &roles()).unwrap();
        let err = data.build_car_from_text("A,C\n").unwrap_err();
        assert!(format!("{err}").contains("C"));
        assert!(data.build_car_from_text("A,B\n").is_ok());
    }

    #[test]
    fn unknown_exposure_lists_valid_names() {
        let data = PanelDataset::from_csv_str(CSV, &roles()).unwrap();
        let err = data.exposure_index("pm25").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("z1") && msg.contains("z2"));
    }
}
