pub mod epoch_oracle;
