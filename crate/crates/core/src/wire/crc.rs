//! CRC-16 with polynomial 0x8005, init 0x0000, MSB-first, no final xor.

const POLY: u16 = 0x8005;

const TABLE: [u16; 256] = build_table();

const fn build_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 0x8000 != 0 { (c << 1) ^ POLY } else { c << 1 };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

/// Continues a CRC over `data` from a running value.
pub fn update(crc: u16, data: &[u8]) -> u16 {
    data.iter().fold(crc, |crc, &b| {
        let idx = ((crc >> 8) ^ u16::from(b)) & 0xFF;
        (crc << 8) ^ TABLE[idx as usize]
    })
}

pub fn crc16(data: &[u8]) -> u16 {
    update(0, data)
}
