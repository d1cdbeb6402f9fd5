package com.example.report;

import java.util.List;
import java.util.Map;
import org.owasp.encoder.Encode;

public class ReportService {

    private Map<String, String> cache;

    public String renderRow(String label, List<String> cells) {
        String safe = Encode.forHtml(label);
        StringBuilder sb = new StringBuilder();
        sb.append(safe);
        for (String cell : cells) {
            sb.append(cell);
        }
        return sb.toString();
    }

    public void storeRow(String key, String row) {
        cache.put(key, row);
        int n = cache.size();
    }
}
