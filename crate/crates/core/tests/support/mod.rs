pub mod metric_oracle;
