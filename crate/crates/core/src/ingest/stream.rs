use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use csv::StringRecord;

use super::{EngagementMinuteRecord, Intensity, MinuteActivityRecord, UserId, MINUTES_PER_DAY};
use crate::error::{Error, Result};

pub const ACTIVITY_HEADER: [&str; 5] = ["user_id", "date", "minute_of_day", "steps", "intensity"];
pub const ENGAGEMENT_HEADER: [&str; 5] = [
    "user_id",
    "date",
    "minute_of_day",
    "foreground_minutes",
    "opens",
];

struct RowCtx<'a> {
    file: &'a str,
    line: u64,
}

impl RowCtx<'_> {
    fn parse_err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            line: self.line,
            message: message.into(),
        }
    }

    fn schema_err(&self, message: impl Into<String>) -> Error {
        Error::Schema {
            file: self.file.to_string(),
            line: self.line,
            message: message.into(),
        }
    }

    fn date(&self, field: &str) -> Result<NaiveDate> {
        NaiveDate::parse_from_str(field, "%Y-%m-%d")
            .map_err(|e| self.parse_err(format!("bad date {field:?}: {e}")))
    }

    fn minute(&self, field: &str) -> Result<u16> {
        let minute: u16 = field
            .parse()
            .map_err(|_| self.parse_err(format!("bad minute_of_day {field:?}")))?;
        if minute >= MINUTES_PER_DAY {
            return Err(self.schema_err(format!("minute_of_day {minute} outside 0..=1439")));
        }
        Ok(minute)
    }

    fn count(&self, name: &str, field: &str) -> Result<u32> {
        field
            .parse()
            .map_err(|_| self.parse_err(format!("bad {name} {field:?}")))
    }
}

fn open_reader<R: Read>(reader: R, file: &str, header: &[&str; 5]) -> Result<csv::Reader<R>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let found = rdr.headers()?.clone();
    if found.is_empty() {
        // empty file
        return Ok(rdr);
    }
    let matches = found.len() == header.len() && found.iter().zip(header).all(|(a, b)| a == *b);
    if !matches {
        return Err(Error::Schema {
            file: file.to_string(),
            line: 1,
            message: format!(
                "expected header {}, found {}",
                header.join(","),
                join(&found)
            ),
        });
    }
    Ok(rdr)
}

fn join(rec: &StringRecord) -> String {
    rec.iter().collect::<Vec<_>>().join(",")
}

fn check_duplicates<T>(
    rows: &mut [(u64, T)],
    file: &str,
    key: impl Fn(&T) -> (&UserId, NaiveDate, u16),
) -> Result<()> {
    rows.sort_by(|a, b| key(&a.1).cmp(&key(&b.1)).then(a.0.cmp(&b.0)));
    for pair in rows.windows(2) {
        let (ka, kb) = (key(&pair[0].1), key(&pair[1].1));
        if ka == kb {
            return Err(Error::DuplicateRecord {
                file: file.to_string(),
                line: pair[1].0,
                user_id: kb.0.to_string(),
                date: kb.1.to_string(),
                minute: kb.2,
            });
        }
    }
    Ok(())
}

/// Parse an activity CSV stream. `file` labels error messages.
///
/// Output is sorted by user, then `(date, minute_of_day)`.
pub fn parse_activity<R: Read>(reader: R, file: &str) -> Result<Vec<MinuteActivityRecord>> {
    let mut rdr = open_reader(reader, file, &ACTIVITY_HEADER)?;
    let mut rows = Vec::new();
    let mut record = StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| Error::Parse {
            file: file.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let ctx = RowCtx {
            file,
            line: record.position().map_or(0, |p| p.line()),
        };
        if record.len() != 5 {
            return Err(ctx.parse_err(format!("expected 5 fields, found {}", record.len())));
        }
        let user_id = &record[0];
        if user_id.is_empty() {
            return Err(ctx.parse_err("empty user_id"));
        }
        let date = ctx.date(&record[1])?;
        let minute_of_day = ctx.minute(&record[2])?;
        let steps = ctx.count("steps", &record[3])?;
        let intensity = Intensity::parse(&record[4])
            .ok_or_else(|| ctx.schema_err(format!("unknown intensity label {:?}", &record[4])))?;
        if intensity == Intensity::Nonwear && steps != 0 {
            return Err(ctx.schema_err(format!("nonwear minute with {steps} steps")));
        }
        rows.push((
            ctx.line,
            MinuteActivityRecord {
                user_id: UserId::new(user_id),
                date,
                minute_of_day,
                steps,
                intensity,
            },
        ));
    }
    check_duplicates(&mut rows, file, |r| (&r.user_id, r.date, r.minute_of_day))?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Parse an engagement CSV stream. `file` labels error messages.
pub fn parse_engagement<R: Read>(reader: R, file: &str) -> Result<Vec<EngagementMinuteRecord>> {
    let mut rdr = open_reader(reader, file, &ENGAGEMENT_HEADER)?;
    let mut rows = Vec::new();
    let mut record = StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| Error::Parse {
            file: file.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let ctx = RowCtx {
            file,
            line: record.position().map_or(0, |p| p.line()),
        };
        if record.len() != 5 {
            return Err(ctx.parse_err(format!("expected 5 fields, found {}", record.len())));
        }
        let user_id = &record[0];
        if user_id.is_empty() {
            return Err(ctx.parse_err("empty user_id"));
        }
        let date = ctx.date(&record[1])?;
        let minute_of_day = ctx.minute(&record[2])?;
        let foreground_minutes: f64 = record[3]
            .parse()
            .map_err(|_| ctx.parse_err(format!("bad foreground_minutes {:?}", &record[3])))?;
        if !(0.0..=1.0).contains(&foreground_minutes) {
            return Err(ctx.schema_err(format!(
                "foreground_minutes {foreground_minutes} outside [0, 1]"
            )));
        }
        let opens = ctx.count("opens", &record[4])?;
        rows.push((
            ctx.line,
            EngagementMinuteRecord {
                user_id: UserId::new(user_id),
                date,
                minute_of_day,
                foreground_minutes,
                opens,
            },
        ));
    }
    check_duplicates(&mut rows, file, |r| (&r.user_id, r.date, r.minute_of_day))?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

fn open_file(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Read both minute streams from disk.
pub fn parse_streams(
    activity_file: &Path,
    engagement_file: &Path,
) -> Result<(Vec<MinuteActivityRecord>, Vec<EngagementMinuteRecord>)> {
    let activity = parse_activity(
        open_file(activity_file)?,
        &activity_file.display().to_string(),
    )?;
    let engagement = parse_engagement(
        open_file(engagement_file)?,
        &engagement_file.display().to_string(),
    )?;
    Ok((activity, engagement))
}

pub fn write_activity_csv<'a, W: Write>(
    records: impl IntoIterator<Item = &'a MinuteActivityRecord>,
    writer: W,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "{}", ACTIVITY_HEADER.join(","))?;
    write_activity_rows(records, &mut w)?;
    w.flush()
}

/// Rows only, for appending to a stream that already has its header.
pub fn write_activity_rows<'a, W: Write>(
    records: impl IntoIterator<Item = &'a MinuteActivityRecord>,
    w: &mut W,
) -> std::io::Result<()> {
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.user_id,
            r.date.format("%Y-%m-%d"),
            r.minute_of_day,
            r.steps,
            r.intensity.as_str()
        )?;
    }
    Ok(())
}

pub fn write_engagement_csv<'a, W: Write>(
    records: impl IntoIterator<Item = &'a EngagementMinuteRecord>,
    writer: W,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "{}", ENGAGEMENT_HEADER.join(","))?;
    write_engagement_rows(records, &mut w)?;
    w.flush()
}

pub fn write_engagement_rows<'a, W: Write>(
    records: impl IntoIterator<Item = &'a EngagementMinuteRecord>,
    w: &mut W,
) -> std::io::Result<()> {
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.user_id,
            r.date.format("%Y-%m-%d"),
            r.minute_of_day,
            r.foreground_minutes,
            r.opens
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_no_records() {
        assert!(parse_activity("".as_bytes(), "a.csv").unwrap().is_empty());
        let header_only = "user_id,date,minute_of_day,steps,intensity\n";
        assert!(parse_activity(header_only.as_bytes(), "a.csv")
            .unwrap()
            .is_empty());
        assert!(parse_engagement("".as_bytes(), "e.csv").unwrap().is_empty());
    }

    #[test]
    fn single_row_maps_fields() {
        let csv = "user_id,date,minute_of_day,steps,intensity\nu1,2020-01-06,480,12,light\n";
        let recs = parse_activity(csv.as_bytes(), "a.csv").unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.user_id.as_str(), "u1");
        assert_eq!(r.date, NaiveDate::from_ymd_opt(2020, 1, 6).unwrap());
        assert_eq!(r.minute_of_day, 480);
        assert_eq!(r.steps, 12);
        assert_eq!(r.intensity, Intensity::Light);
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "user_id,date,minute_of_day,steps,intensity\nu1,2020-01-06,480,12,light\nu1,2020-01-06,abc,1,light\n";
        match parse_activity(csv.as_bytes(), "a.csv") {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, "a.csv");
                assert_eq!(line, 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let short = "user_id,date,minute_of_day,steps,intensity\nu1,2020-01-06,480\n";
        assert!(matches!(
            parse_activity(short.as_bytes(), "a.csv"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_minute_rejected() {
        let csv = "user_id,date,minute_of_day,steps,intensity\nu1,2020-01-06,480,12,light\nu1,2020-01-06,480,3,light\n";
        assert!(matches!(
            parse_activity(csv.as_bytes(), "a.csv"),
            Err(Error::DuplicateRecord {
                line: 3,
                minute: 480,
                ..
            })
        ));
        let csv = "user_id,date,minute_of_day,foreground_minutes,opens\nu1,2020-01-06,5,0.5,1\nu1,2020-01-06,5,0.5,0\n";
        assert!(matches!(
            parse_engagement(csv.as_bytes(), "e.csv"),
            Err(Error::DuplicateRecord { .. })
        ));
    }

    #[test]
    fn unknown_intensity_is_schema_error() {
        let csv = "user_id,date,minute_of_day,steps,intensity\nu1,2020-01-06,480,12,vigorous\n";
        assert!(matches!(
            parse_activity(csv.as_bytes(), "a.csv"),
            Err(Error::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn range_checks() {
        let csv = "user_id,date,minute_of_day,steps,intensity\nu1,2020-01-06,1440,0,sedentary\n";
        assert!(matches!(
            parse_activity(csv.as_bytes(), "a.csv"),
            Err(Error::Schema { .. })
        ));
        let csv = "user_id,date,minute_of_day,steps,intensity\nu1,2020-01-06,10,4,nonwear\n";
        assert!(matches!(
            parse_activity(csv.as_bytes(), "a.csv"),
            Err(Error::Schema { .. })
        ));
        let csv = "user_id,date,minute_of_day,foreground_minutes,opens\nu1,2020-01-06,5,1.5,1\n";
        assert!(matches!(
            parse_engagement(csv.as_bytes(), "e.csv"),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn output_grouped_and_sorted() {
        let csv = "user_id,date,minute_of_day,steps,intensity\n\
                   u2,2020-01-06,3,0,sedentary\n\
                   u1,2020-01-07,1,0,sedentary\n\
                   u1,2020-01-06,9,0,sedentary\n\
                   u1,2020-01-06,2,0,sedentary\n";
        let recs = parse_activity(csv.as_bytes(), "a.csv").unwrap();
        let keys: Vec<_> = recs
            .iter()
            .map(|r| (r.user_id.to_string(), r.date.to_string(), r.minute_of_day))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("u1".into(), "2020-01-06".into(), 2),
                ("u1".into(), "2020-01-06".into(), 9),
                ("u1".into(), "2020-01-07".into(), 1),
                ("u2".into(), "2020-01-06".into(), 3),
            ]
        );
    }

    #[test]
    fn full_day_round_trips() {
        let date = NaiveDate::from_ymd_opt(2021, 3, 4).unwrap();
        let user = UserId::new("p-17");
        let labels = [
            Intensity::Nonwear,
            Intensity::Sedentary,
            Intensity::Light,
            Intensity::Mvpa,
        ];
        let activity: Vec<_> = (0..MINUTES_PER_DAY)
            .map(|m| {
                let intensity = labels[(m as usize * 7 + 3) % 4];
                let steps = match intensity {
                    Intensity::Nonwear | Intensity::Sedentary => 0,
                    Intensity::Light => 1 + u32::from(m) % 99,
                    Intensity::Mvpa => 100 + u32::from(m) % 50,
                };
                MinuteActivityRecord {
                    user_id: user.clone(),
                    date,
                    minute_of_day: m,
                    steps,
                    intensity,
                }
            })
            .collect();
        let engagement: Vec<_> = (0..MINUTES_PER_DAY)
            .map(|m| EngagementMinuteRecord {
                user_id: user.clone(),
                date,
                minute_of_day: m,
                foreground_minutes: f64::from(m % 17) / 16.0 * 0.999_999_7,
                opens: u32::from(m % 3),
            })
            .collect();

        let mut buf = Vec::new();
        write_activity_csv(&activity, &mut buf).unwrap();
        let back = parse_activity(buf.as_slice(), "a.csv").unwrap();
        assert_eq!(back, activity);

        let mut buf = Vec::new();
        write_engagement_csv(&engagement, &mut buf).unwrap();
        let back = parse_engagement(buf.as_slice(), "e.csv").unwrap();
        assert_eq!(back, engagement);
    }
}
